//! Latent prior models used for the rate term and for entropy coding.
//!
//! All priors factorize over the D latent dimensions of a frame: each
//! dimension gets its own categorical distribution over the K codebook
//! levels, optionally conditioned on a per-frame context vector.

use rand::Rng;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{Activation, Bound, Linear, ModelParams, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PriorKind {
    Uniform = 0,
    TimeInvariant = 1,
    CondPrevLatent = 2,
    CondDecoderState = 3,
}

impl PriorKind {
    pub const ALL: [PriorKind; 4] = [
        PriorKind::Uniform,
        PriorKind::TimeInvariant,
        PriorKind::CondPrevLatent,
        PriorKind::CondDecoderState,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        PriorKind::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Uniform => "uniform",
            PriorKind::TimeInvariant => "time-invariant",
            PriorKind::CondPrevLatent => "prev-latent",
            PriorKind::CondDecoderState => "decoder-state",
        }
    }

    pub fn is_conditional(self) -> bool {
        matches!(self, PriorKind::CondPrevLatent | PriorKind::CondDecoderState)
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(PriorKind::Uniform),
            "time-invariant" | "ti" => Ok(PriorKind::TimeInvariant),
            "prev-latent" | "z" => Ok(PriorKind::CondPrevLatent),
            "decoder-state" | "h" => Ok(PriorKind::CondDecoderState),
            _ => Err(format!("unknown prior kind '{s}'")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{kind} prior: conditioning {0}", kind = .1)]
    Conditioning(&'static str, PriorKind),
}

impl From<crate::autodiff::AutodiffError> for PriorError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        PriorError::Nn(e.into())
    }
}

/// Per-dimension categorical prior over codebook indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    pub kind: PriorKind,
    pub latent_dim: usize,
    pub levels: usize,
    pub cond_dim: usize,
    pub hidden: usize,
}

const TABLE: &str = "prior.logits";

impl PriorModel {
    pub fn new(kind: PriorKind, latent_dim: usize, levels: usize, cond_dim: usize, hidden: usize) -> Self {
        PriorModel {
            kind,
            latent_dim,
            levels,
            cond_dim: if kind.is_conditional() { cond_dim } else { 0 },
            hidden,
        }
    }

    fn layers(&self) -> (Linear, Linear) {
        (
            Linear::new("prior.fc1", self.cond_dim, self.hidden, Activation::Tanh),
            Linear::new("prior.fc2", self.hidden, self.latent_dim * self.levels, Activation::Linear),
        )
    }

    /// Every prior starts out uniform: zero logit table, zero output layer.
    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<(), PriorError> {
        match self.kind {
            PriorKind::Uniform => {}
            PriorKind::TimeInvariant => {
                params.insert(TABLE, Tensor::zeros(&[self.latent_dim, self.levels]))?;
            }
            _ => {
                let (fc1, fc2) = self.layers();
                fc1.init(params, rng)?;
                fc2.init(params, rng)?;
                params.get_mut(&fc2.weight_name())?.data_mut().fill(0.0);
            }
        }
        Ok(())
    }

    /// Logits of shape `[(B·D) × K]` for a batch of `batch` frames.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, conditioning: Option<Var>, batch: usize) -> Result<Var, PriorError> {
        match (self.kind.is_conditional(), conditioning) {
            (true, None) => return Err(PriorError::Conditioning("missing", self.kind)),
            (false, Some(_)) => return Err(PriorError::Conditioning("not accepted", self.kind)),
            _ => {}
        }
        let d = self.latent_dim;
        let k = self.levels;
        match self.kind {
            PriorKind::Uniform => Ok(tape.constant(Tensor::zeros(&[batch * d, k]))),
            PriorKind::TimeInvariant => Ok(tape.repeat_rows(bound.var(TABLE)?, batch)?),
            _ => {
                let c = conditioning.unwrap();
                let shape = tape.shape(c);
                if shape.len() != 2 || shape[0] != batch || shape[1] != self.cond_dim {
                    return Err(PriorError::Conditioning("has the wrong shape", self.kind));
                }
                let (fc1, fc2) = self.layers();
                let hidden = fc1.forward(tape, bound, c)?;
                let flat = fc2.forward(tape, bound, hidden)?;
                Ok(tape.reshape(flat, &[batch * d, k])?)
            }
        }
    }

    /// Summed negative log-likelihood in nats of the (soft or one-hot)
    /// assignment `[(B·D) × K]` under `logits`.
    pub fn rate_nats(&self, tape: &mut Tape, logits: Var, assignment: Var) -> Result<Var, PriorError> {
        let logp = tape.log_softmax(logits);
        let weighted = tape.mul(assignment, logp)?;
        let total = tape.sum(weighted);
        Ok(tape.scale(total, -1.0))
    }
}

/// Row-wise softmax of a `[rows × K]` logit table.
pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

/// `Σ_d −log2 p[d, indices[d]]` for probabilities laid out `[D × K]`.
pub fn nll_bits(probs: &[f64], levels: usize, indices: &[usize]) -> f64 {
    indices.iter().enumerate().map(|(d, &i)| -probs[d * levels + i].log2()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: PriorKind) -> (PriorModel, ModelParams) {
        let prior = PriorModel::new(kind, 8, 4, 5, 16);
        let mut params = ModelParams::new();
        prior.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (prior, params)
    }

    #[test]
    fn uniform_is_quarter_and_16_bits() {
        let (prior, params) = setup(PriorKind::Uniform);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let l = prior.logits(&mut tape, &b, None, 1).unwrap();
        let p = probabilities(tape.value(l));
        assert!(p.iter().all(|&v| v == 0.25));
        assert_eq!(nll_bits(&p, 4, &[0, 1, 2, 3, 0, 1, 2, 3]), 16.0);
    }

    #[test]
    fn fresh_conditional_prior_is_uniform() {
        for kind in [PriorKind::CondPrevLatent, PriorKind::CondDecoderState] {
            let (prior, params) = setup(kind);
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let c = tape.constant(Tensor::new(vec![2, 5], (0..10).map(|i| i as f64 * 0.3).collect()).unwrap());
            let l = prior.logits(&mut tape, &b, Some(c), 2).unwrap();
            assert_eq!(tape.shape(l), &[16, 4]);
            assert!(probabilities(tape.value(l)).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn conditioning_presence_checked() {
        let (prior, params) = setup(PriorKind::CondDecoderState);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        assert!(prior.logits(&mut tape, &b, None, 1).is_err());
        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(prior.logits(&mut tape, &b, Some(bad), 1).is_err());
        let (ti, params) = setup(PriorKind::TimeInvariant);
        let b = params.bind(&mut tape);
        let c = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(ti.logits(&mut tape, &b, Some(c), 1).is_err());
    }

    #[test]
    fn probabilities_normalized() {
        let t = Tensor::new(vec![3, 4], vec![0.1, 5.0, -3.0, 2.0, 100.0, -100.0, 0.0, 1.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        for row in probabilities(&t).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn certain_symbol_costs_nothing() {
        assert_eq!(nll_bits(&[0.0, 1.0, 0.0, 0.0], 4, &[1]), 0.0);
    }

    #[test]
    fn rate_of_one_hot_matches_nll() {
        let (prior, mut params) = setup(PriorKind::TimeInvariant);
        params
            .get_mut(TABLE)
            .unwrap()
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let l = prior.logits(&mut tape, &b, None, 1).unwrap();
        let idx = [0, 3, 2, 1, 1, 0, 3, 2];
        let mut onehot = vec![0.0; 32];
        idx.iter().enumerate().for_each(|(d, &i)| onehot[d * 4 + i] = 1.0);
        let a = tape.constant(Tensor::new(vec![8, 4], onehot).unwrap());
        let r = prior.rate_nats(&mut tape, l, a).unwrap();
        let p = probabilities(tape.value(l));
        let bits = nll_bits(&p, 4, &idx);
        assert!((tape.value(r).item() / std::f64::consts::LN_2 - bits).abs() < 1e-12);
    }

    #[test]
    fn codes_round_trip() {
        for k in PriorKind::ALL {
            assert_eq!(PriorKind::from_code(k.code()), Some(k));
            assert_eq!(k.name().parse::<PriorKind>().unwrap(), k);
        }
        assert_eq!(PriorKind::from_code(4), None);
    }
}
