//! Training losses: next-title cross-entropy, the three factor regularizers
//! and their uncertainty-weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{contract, FlrError, Result};
use crate::numerics::{Tensor, Var};

/// Floor applied to gate weights inside the entropy logarithm.
pub const SPARSITY_EPS: f64 = 1e-8;

/// Learnable log-variances `s_1..s_3`; `λ_i = 1 / (2 exp(s_i))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub s: Tensor,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            s: Tensor::zeros(&[3]),
        }
    }
}

impl RegWeights {
    pub fn from_log_vars(s: [f64; 3]) -> Self {
        Self {
            s: Tensor::vector(s.to_vec()),
        }
    }

    pub fn lambdas(&self) -> [f64; 3] {
        let s = self.s.data();
        [lambda(s[0]), lambda(s[1]), lambda(s[2])]
    }
}

pub fn lambda(s: f64) -> f64 {
    0.5 * (-s).exp()
}

/// Which regularizers participate, and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub use_orth: bool,
    pub use_div: bool,
    pub use_sparse: bool,
    /// Fixed `λ` values instead of learned log-variances.
    #[serde(default)]
    pub fixed_lambdas: Option<[f64; 3]>,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            use_orth: true,
            use_div: true,
            use_sparse: true,
            fixed_lambdas: None,
        }
    }
}

impl LossToggles {
    pub fn none() -> Self {
        Self {
            use_orth: false,
            use_div: false,
            use_sparse: false,
            fixed_lambdas: None,
        }
    }

    pub fn enabled(&self) -> [bool; 3] {
        [self.use_orth, self.use_div, self.use_sparse]
    }
}

/// Scalar summary of one optimization step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_orth: f64,
    pub l_div: f64,
    pub l_sparse: f64,
    pub l_total: f64,
    pub lambdas: [f64; 3],
    pub batch_size: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_rec,l_orth,l_div,l_sparse,lambda1,lambda2,lambda3,l_total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{}",
            self.l_rec,
            self.l_orth,
            self.l_div,
            self.l_sparse,
            self.lambdas[0],
            self.lambdas[1],
            self.lambdas[2],
            self.l_total
        )
    }

    /// Mean of per-sample reports; `batch_size` becomes the total.
    pub fn average(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.l_rec += r.l_rec / n;
            out.l_orth += r.l_orth / n;
            out.l_div += r.l_div / n;
            out.l_sparse += r.l_sparse / n;
            out.l_total += r.l_total / n;
            out.batch_size += r.batch_size;
        }
        out.lambdas = reports.first().map(|r| r.lambdas).unwrap_or_default();
        out
    }
}

/// Mean next-token cross-entropy. `logits` holds exactly the rows that
/// predict `targets` (prompt and thought positions already excluded).
pub fn rec_loss<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    if targets.is_empty() {
        return Err(contract("rec_loss needs a nonempty target"));
    }
    Ok(logits.log_softmax().pick(targets)?.mean().neg())
}

fn batch_mean<'t>(terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| contract("empty batch"))?;
    let mut acc = first;
    for t in it {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / n as f64))
}

/// `(1/B) Σ_b ‖F̂_b F̂_bᵀ − I_K‖_F²` with unit-normalized factor rows.
pub fn orth_loss<'t>(factors: &[Var<'t>]) -> Result<Var<'t>> {
    let terms = factors
        .iter()
        .map(|f| {
            let k = f.shape()[0];
            let fh = f.normalize_rows()?;
            let gram = fh.matmul_t(fh)?;
            let eye = f.tape().constant(Tensor::eye(k));
            let diff = gram.sub(eye)?;
            Ok(diff.mul(diff)?.sum())
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(terms)
}

/// Batch mean of the average pairwise cosine between attention maps.
/// Zero for a single factor.
pub fn attn_div_loss<'t>(attention: &[Var<'t>]) -> Result<Var<'t>> {
    let terms = attention
        .iter()
        .map(|a| {
            let k = a.shape()[0];
            let tape = a.tape();
            if k < 2 {
                return Ok(tape.scalar(0.0));
            }
            let ah = a.normalize_rows()?;
            let cos = ah.matmul_t(ah)?;
            let mut upper = Tensor::zeros(&[k, k]);
            let w = 2.0 / (k * (k - 1)) as f64;
            for i in 0..k {
                for j in i + 1..k {
                    upper.data_mut()[i * k + j] = w;
                }
            }
            Ok(cos.mul(tape.constant(upper))?.sum())
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(terms)
}

/// Entropy of the gate weights, `−(1/B) Σ_b Σ_k α log(max(α, ε))`. Exact for
/// weights above `ε`, so uniform gates give `ln K` and `K = 1` gives 0.
pub fn sparsity_loss<'t>(alphas: &[Var<'t>]) -> Result<Var<'t>> {
    let terms = alphas
        .iter()
        .map(|a| Ok(a.mul(a.clamp(SPARSITY_EPS, f64::INFINITY).ln())?.sum().neg()))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(terms)
}

/// `l_rec + Σ_i [λ_i L_i + s_i / 2]` over the enabled regularizers, with
/// `λ_i = 1/(2 exp(s_i))` taken from `log_vars` (or fixed λ, no penalty).
pub fn combine<'t>(
    l_rec: Var<'t>,
    regs: [Var<'t>; 3],
    log_vars: Var<'t>,
    toggles: &LossToggles,
) -> Result<Var<'t>> {
    for (name, v) in [("l_rec", l_rec), ("l_orth", regs[0]), ("l_div", regs[1]), ("l_sparse", regs[2])] {
        if !v.item().is_finite() {
            return Err(FlrError::Divergence(format!("{name} is {}", v.item())));
        }
    }
    let mut total = l_rec;
    for (i, (&on, reg)) in toggles.enabled().iter().zip(regs).enumerate() {
        if !on {
            continue;
        }
        let term = match toggles.fixed_lambdas {
            Some(l) => reg.scale(l[i]),
            None => {
                let s = log_vars.reshape(&[3, 1])?.gather_rows(&[i])?.reshape(&[1])?;
                let lam = s.neg().exp().scale(0.5);
                lam.mul(reg)?.add(s.scale(0.5))?
            }
        };
        total = total.add(term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn rec_loss_cases() {
        let tape = Tape::new();
        // near-perfect prediction
        let mut t = Tensor::full(&[2, 4], -1e3);
        t.data_mut()[1] = 1e3;
        t.data_mut()[4 + 3] = 1e3;
        let l = rec_loss(tape.constant(t), &[1, 3]).unwrap().item();
        assert!(l.abs() < 1e-12);
        let uni = tape.constant(Tensor::zeros(&[3, 7]));
        assert!((rec_loss(uni, &[0, 1, 2]).unwrap().item() - 7f64.ln()).abs() < 1e-12);
        let probs = Tensor::from_rows(&[vec![0.5f64.ln(), 0.5f64.ln()], vec![0.25f64.ln(), 0.75f64.ln()]]).unwrap();
        let l = rec_loss(tape.constant(probs), &[0, 0]).unwrap().item();
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l - 1.0397).abs() < 1e-4);
        assert!(rec_loss(tape.constant(Tensor::zeros(&[0, 3])), &[]).is_err());
    }

    #[test]
    fn orth_loss_cases() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::eye(3));
        assert!(orth_loss(&[eye]).unwrap().item().abs() < 1e-12);
        let same = tape.constant(Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap());
        assert!((orth_loss(&[same]).unwrap().item() - 12.0).abs() < 1e-9);
        let r = 60f64.to_radians();
        let rows = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![r.cos(), r.sin()]]).unwrap());
        assert!((orth_loss(&[rows]).unwrap().item() - 0.5).abs() < 1e-12);
        let zero_row = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        assert!(orth_loss(&[zero_row]).is_err());
        let single = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap());
        assert!(orth_loss(&[single]).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn orth_loss_is_row_scale_invariant() {
        let tape = Tape::new();
        let f = Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![-0.3, 1.0, 2.0]]).unwrap();
        let mut g = f.clone();
        g.data_mut()[..3].iter_mut().for_each(|x| *x *= 7.0);
        let a = orth_loss(&[tape.constant(f)]).unwrap().item();
        let b = orth_loss(&[tape.constant(g)]).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn attn_div_cases() {
        let tape = Tape::new();
        let same = tape.constant(Tensor::from_rows(&vec![vec![0.2, 0.3, 0.5]; 3]).unwrap());
        assert!((attn_div_loss(&[same]).unwrap().item() - 1.0).abs() < 1e-9);
        let disjoint = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
        assert!(attn_div_loss(&[disjoint]).unwrap().item().abs() < 1e-12);
        let hand = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap());
        assert!((attn_div_loss(&[hand]).unwrap().item() - 0.5f64.sqrt()).abs() < 1e-9);
        let single = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        assert_eq!(attn_div_loss(&[single]).unwrap().item(), 0.0);
    }

    #[test]
    fn sparsity_cases() {
        let tape = Tape::new();
        let one_hot = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        assert!(sparsity_loss(&[one_hot]).unwrap().item().abs() < 1e-6);
        let uni = tape.constant(Tensor::full(&[1, 4], 0.25));
        assert!((sparsity_loss(&[uni]).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let single = tape.constant(Tensor::vector(vec![1.0]));
        assert_eq!(sparsity_loss(&[single]).unwrap().item(), 0.0);
    }

    #[test]
    fn combine_cases() {
        assert_eq!(RegWeights::default().lambdas(), [0.5; 3]);
        let tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[3]));
        let zero = tape.scalar(0.0);
        let rec = tape.scalar(1.7);
        let t = combine(rec, [zero, zero, zero], s, &LossToggles::default()).unwrap();
        assert!((t.item() - 1.7).abs() < 1e-15);

        let s = tape.constant(Tensor::vector(vec![2f64.ln(), 0.0, 0.0]));
        let t = combine(tape.scalar(0.0), [tape.scalar(2.0), zero, zero], s, &LossToggles::default()).unwrap();
        assert!((t.item() - (0.5 + 2f64.ln() / 2.0)).abs() < 1e-12);
        assert!((t.item() - 0.8466).abs() < 1e-4);

        let bad = combine(tape.scalar(f64::NAN), [zero, zero, zero], s, &LossToggles::default());
        assert!(matches!(bad, Err(FlrError::Divergence(_))));
    }

    #[test]
    fn log_var_gradient_matches_closed_form() {
        // ∂l_total/∂s_i = −λ_i L_i + 1/2
        let tape = Tape::new();
        let s = tape.param(Tensor::vector(vec![0.3, -0.2, 1.1]));
        let regs = [tape.scalar(2.0), tape.scalar(0.4), tape.scalar(0.9)];
        let t = combine(tape.scalar(1.0), regs, s, &LossToggles::default()).unwrap();
        let g = tape.backward(t).unwrap();
        let gs = g.get(s).unwrap();
        for (i, l) in [2.0, 0.4, 0.9].iter().enumerate() {
            let expected = -lambda(s.value().data()[i]) * l + 0.5;
            assert!((gs.data()[i] - expected).abs() < 1e-12);
        }
        // stationary point λ L = 1/2  ⇔  s = ln L
        let tape = Tape::new();
        let s = tape.param(Tensor::vector(vec![2f64.ln(), 0.0, 0.0]));
        let t = combine(tape.scalar(0.0), [tape.scalar(2.0), tape.scalar(1.0), tape.scalar(1.0)], s, &LossToggles::default()).unwrap();
        let g = tape.backward(t).unwrap();
        assert!(g.get(s).unwrap().data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn disabled_regularizers_drop_out() {
        let tape = Tape::new();
        let s = tape.param(Tensor::zeros(&[3]));
        let regs = [tape.scalar(2.0), tape.scalar(0.4), tape.scalar(0.9)];
        let t = combine(tape.scalar(1.0), regs, s, &LossToggles::none()).unwrap();
        assert_eq!(t.item(), 1.0);
        let toggles = LossToggles {
            fixed_lambdas: Some([0.1, 0.2, 0.3]),
            ..LossToggles::default()
        };
        let t = combine(tape.scalar(1.0), regs, s, &toggles).unwrap();
        assert!((t.item() - (1.0 + 0.2 + 0.08 + 0.27)).abs() < 1e-12);
    }
}
