//! Reconstruction cross-entropies, the reconstruction loss and the
//! intra-video contrastive hinge losses.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::MaskedQuery;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Contrastive margins. `beta1 < beta2` for the forward stream and
/// `beta3 < beta4` for the inverse one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl Margins {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            beta3: cfg.beta3,
            beta4: cfg.beta4,
        }
    }
}

fn check_margins(lo: f64, hi: f64) -> Result<()> {
    if !(lo >= 0.0 && lo < hi) {
        return Err(Error::Config(format!(
            "margins must satisfy 0 <= {lo} < {hi}"
        )));
    }
    Ok(())
}

/// `-sum log p(target_i)` over valid positions. `dist[i]` is the vocabulary
/// distribution at position `i`.
pub fn reconstruction_ce(dist: &[Vec<f64>], target: &MaskedQuery) -> Result<f64> {
    if dist.len() < target.valid_len {
        return Err(Error::Shape(format!(
            "{} distributions for {} valid positions",
            dist.len(),
            target.valid_len
        )));
    }
    let mut total = 0.0;
    for (i, column) in dist.iter().enumerate().take(target.valid_len) {
        let id = target.target_ids[i] as usize;
        let p = *column
            .get(id)
            .ok_or_else(|| Error::Shape(format!("target id {id} outside a vocabulary of {}", column.len())))?;
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total)
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// `max(p - h + lo, 0) + max(p - e + hi, 0)`.
fn ivc(ce_p: f64, ce_h: f64, ce_e: f64, lo: f64, hi: f64) -> Result<f64> {
    check_margins(lo, hi)?;
    Ok(hinge(ce_p - ce_h + lo) + hinge(ce_p - ce_e + hi))
}

pub fn ivc_forward(ce_p: f64, ce_h: f64, ce_e: f64, beta1: f64, beta2: f64) -> Result<f64> {
    ivc(ce_p, ce_h, ce_e, beta1, beta2)
}

pub fn ivc_inverse(ce_p: f64, ce_h: f64, ce_e: f64, beta3: f64, beta4: f64) -> Result<f64> {
    ivc(ce_p, ce_h, ce_e, beta3, beta4)
}

pub fn ivc_total(l_f: f64, l_i: f64) -> f64 {
    l_f + l_i
}

/// Loss values of one step. Inverse-stream entries are `None` when that
/// stream is disabled. Batched terms are means over the batch; the hinge
/// terms are per-example hinges averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce_f_pos: f64,
    pub ce_f_hard: f64,
    pub ce_f_easy: f64,
    pub ce_i_pos: Option<f64>,
    pub ce_i_hard: Option<f64>,
    pub ce_i_easy: Option<f64>,
    pub l_rec: f64,
    pub l_ivc_f: f64,
    pub l_ivc_i: Option<f64>,
    pub l_ivc: f64,
}

impl LossBundle {
    /// Builds a bundle for a single example from its six (or three) CE values.
    pub fn from_ce(forward: [f64; 3], inverse: Option<[f64; 3]>, m: &Margins) -> Result<Self> {
        let [fp, fh, fe] = forward;
        let l_ivc_f = ivc_forward(fp, fh, fe, m.beta1, m.beta2)?;
        let l_ivc_i = inverse
            .map(|[ip, ih, ie]| ivc_inverse(ip, ih, ie, m.beta3, m.beta4))
            .transpose()?;
        let mut b = Self {
            ce_f_pos: fp,
            ce_f_hard: fh,
            ce_f_easy: fe,
            ce_i_pos: inverse.map(|v| v[0]),
            ce_i_hard: inverse.map(|v| v[1]),
            ce_i_easy: inverse.map(|v| v[2]),
            l_rec: 0.0,
            l_ivc_f,
            l_ivc_i,
            l_ivc: ivc_total(l_ivc_f, l_ivc_i.unwrap_or(0.0)),
        };
        b.l_rec = rec_loss(&b)?;
        Ok(b)
    }

    /// The named CE terms summed into the reconstruction loss.
    pub fn rec_terms(&self) -> Vec<(&'static str, f64)> {
        let mut terms = vec![("ce_f_pos", self.ce_f_pos), ("ce_f_hard", self.ce_f_hard)];
        if let (Some(p), Some(h)) = (self.ce_i_pos, self.ce_i_hard) {
            terms.push(("ce_i_pos", p));
            terms.push(("ce_i_hard", h));
        }
        terms
    }

    /// Every named scalar in the bundle, for finiteness checks and logs.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut all = vec![
            ("ce_f_pos", self.ce_f_pos),
            ("ce_f_hard", self.ce_f_hard),
            ("ce_f_easy", self.ce_f_easy),
        ];
        for (name, v) in [
            ("ce_i_pos", self.ce_i_pos),
            ("ce_i_hard", self.ce_i_hard),
            ("ce_i_easy", self.ce_i_easy),
            ("l_ivc_i", self.l_ivc_i),
        ] {
            if let Some(v) = v {
                all.push((name, v));
            }
        }
        all.extend([("l_rec", self.l_rec), ("l_ivc_f", self.l_ivc_f), ("l_ivc", self.l_ivc)]);
        all
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFiniteLoss(name.to_string())),
            None => Ok(()),
        }
    }
}

/// Sum of the positive and hard-negative CE terms of both streams. Easy
/// negatives never enter it.
pub fn rec_loss(b: &LossBundle) -> Result<f64> {
    let terms = b.rec_terms();
    if let Some((name, v)) = terms.iter().find(|(_, v)| *v < 0.0) {
        return Err(Error::InvalidArgument(format!("negative cross-entropy {name} = {v}")));
    }
    Ok(terms.iter().map(|(_, v)| v).sum())
}

/// Per-example CE tensors (`[B]`) for one stream: positive, hard, easy.
pub struct StreamCe {
    pub pos: Tensor,
    pub hard: Tensor,
    pub easy: Tensor,
}

/// Batched CE terms feeding the differentiable losses.
pub struct CeTensors {
    pub forward: StreamCe,
    pub inverse: Option<StreamCe>,
}

fn hinge_t(x: &Tensor, margin: f64) -> Result<Tensor> {
    Ok((x + margin)?.relu()?)
}

fn mean_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

impl CeTensors {
    /// Batch mean of the summed positive and hard CE terms.
    pub fn rec_loss(&self) -> Result<Tensor> {
        let mut per = (&self.forward.pos + &self.forward.hard)?;
        if let Some(inv) = &self.inverse {
            per = ((per + &inv.pos)? + &inv.hard)?;
        }
        Ok(per.mean_all()?)
    }

    fn stream_ivc(s: &StreamCe, lo: f64, hi: f64) -> Result<Tensor> {
        check_margins(lo, hi)?;
        let a = hinge_t(&(&s.pos - &s.hard)?, lo)?;
        let b = hinge_t(&(&s.pos - &s.easy)?, hi)?;
        Ok((a + b)?)
    }

    /// Batch mean of per-example hinge losses of both streams.
    pub fn ivc_loss(&self, m: &Margins) -> Result<Tensor> {
        let mut per = Self::stream_ivc(&self.forward, m.beta1, m.beta2)?;
        if let Some(inv) = &self.inverse {
            per = (per + Self::stream_ivc(inv, m.beta3, m.beta4)?)?;
        }
        Ok(per.mean_all()?)
    }

    /// Host-side summary of the batch.
    pub fn bundle(&self, m: &Margins) -> Result<LossBundle> {
        let f = &self.forward;
        let l_ivc_f = mean_scalar(&Self::stream_ivc(f, m.beta1, m.beta2)?)?;
        let l_ivc_i = self
            .inverse
            .as_ref()
            .map(|s| mean_scalar(&Self::stream_ivc(s, m.beta3, m.beta4)?))
            .transpose()?;
        let inv = |g: fn(&StreamCe) -> &Tensor| -> Result<Option<f64>> {
            self.inverse.as_ref().map(|s| mean_scalar(g(s))).transpose()
        };
        let mut b = LossBundle {
            ce_f_pos: mean_scalar(&f.pos)?,
            ce_f_hard: mean_scalar(&f.hard)?,
            ce_f_easy: mean_scalar(&f.easy)?,
            ce_i_pos: inv(|s| &s.pos)?,
            ce_i_hard: inv(|s| &s.hard)?,
            ce_i_easy: inv(|s| &s.easy)?,
            l_rec: 0.0,
            l_ivc_f,
            l_ivc_i,
            l_ivc: ivc_total(l_ivc_f, l_ivc_i.unwrap_or(0.0)),
        };
        b.check_finite()?;
        b.l_rec = rec_loss(&b)?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Direction;
    use candle_core::Device;
    use proptest::prelude::*;

    const M: Margins = Margins {
        beta1: 0.1,
        beta2: 0.15,
        beta3: 0.1,
        beta4: 0.15,
    };

    fn target(ids: &[u32], valid_len: usize) -> MaskedQuery {
        MaskedQuery {
            ids: ids.to_vec(),
            target_ids: ids.to_vec(),
            masked_positions: vec![],
            valid_len,
            direction: Direction::Forward,
        }
    }

    #[test]
    fn ce_examples() {
        let t = target(&[1, 2, 0], 2);
        let mut certain = vec![vec![0.0; 3]; 3];
        certain[0][1] = 1.0;
        certain[1][2] = 1.0;
        assert_eq!(reconstruction_ce(&certain, &t).unwrap(), 0.0);
        let uniform = vec![vec![0.01; 100]; 6];
        let t = target(&[5, 6, 7, 8, 0, 0], 4);
        let ce = reconstruction_ce(&uniform, &t).unwrap();
        assert!((ce - 18.420680743952367).abs() < 1e-9);
    }

    #[test]
    fn ce_zero_probability_is_clamped() {
        let t = target(&[1], 1);
        let ce = reconstruction_ce(&[vec![1.0, 0.0]], &t).unwrap();
        assert!((ce - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn ivc_examples() {
        assert_eq!(ivc_forward(1.0, 1.5, 2.0, 0.1, 0.15).unwrap(), 0.0);
        assert!((ivc_forward(1.0, 1.0, 1.0, 0.1, 0.15).unwrap() - 0.25).abs() < 1e-12);
        assert!((ivc_forward(2.0, 1.0, 1.5, 0.1, 0.15).unwrap() - 1.75).abs() < 1e-12);
        assert_eq!(ivc_inverse(1.0, 1.5, 2.0, 0.1, 0.15).unwrap(), 0.0);
        assert!((ivc_inverse(1.0, 1.0, 1.0, 0.1, 0.15).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(ivc_total(0.0, 0.0), 0.0);
        assert_eq!(ivc_total(0.25, 0.5), 0.75);
    }

    #[test]
    fn bad_margins_are_config_errors() {
        assert!(matches!(ivc_forward(1.0, 1.0, 1.0, 0.15, 0.15), Err(Error::Config(_))));
        assert!(matches!(ivc_inverse(1.0, 1.0, 1.0, 0.2, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn rec_loss_terms() {
        let b = LossBundle::from_ce([1.0; 3], Some([1.0; 3]), &M).unwrap();
        assert_eq!(b.l_rec, 4.0);
        assert_eq!(b.rec_terms().len(), 4);
        let c = LossBundle::from_ce([1.0, 1.0, 9.0], Some([1.0, 1.0, 0.3]), &M).unwrap();
        assert_eq!(c.l_rec, 4.0);
        let f = LossBundle::from_ce([1.0; 3], None, &M).unwrap();
        assert_eq!(f.rec_terms().len(), 2);
        assert_eq!(f.l_rec, 2.0);
        assert_eq!(f.l_ivc, f.l_ivc_f);
        assert!(LossBundle::from_ce([-1.0, 1.0, 1.0], None, &M).is_err());
    }

    #[test]
    fn non_finite_terms_are_named() {
        let mut b = LossBundle::from_ce([1.0; 3], Some([1.0; 3]), &M).unwrap();
        b.ce_i_easy = Some(f64::NAN);
        match b.check_finite() {
            Err(Error::NonFiniteLoss(name)) => assert_eq!(name, "ce_i_easy"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tensor_losses_match_scalar_losses() {
        let dev = Device::Cpu;
        let t = |v: &[f64]| Tensor::new(v, &dev).unwrap();
        let ce = CeTensors {
            forward: StreamCe {
                pos: t(&[1.0, 2.0]),
                hard: t(&[1.5, 1.0]),
                easy: t(&[2.0, 1.5]),
            },
            inverse: Some(StreamCe {
                pos: t(&[1.0, 0.5]),
                hard: t(&[1.0, 3.0]),
                easy: t(&[1.0, 3.0]),
            }),
        };
        let per = [
            LossBundle::from_ce([1.0, 1.5, 2.0], Some([1.0, 1.0, 1.0]), &M).unwrap(),
            LossBundle::from_ce([2.0, 1.0, 1.5], Some([0.5, 3.0, 3.0]), &M).unwrap(),
        ];
        let b = ce.bundle(&M).unwrap();
        let mean = |f: fn(&LossBundle) -> f64| (f(&per[0]) + f(&per[1])) / 2.0;
        assert!((b.l_rec - mean(|x| x.l_rec)).abs() < 1e-12);
        assert!((b.l_ivc - mean(|x| x.l_ivc)).abs() < 1e-12);
        let rec = ce.rec_loss().unwrap().to_scalar::<f64>().unwrap();
        let ivc = ce.ivc_loss(&M).unwrap().to_scalar::<f64>().unwrap();
        assert!((rec - b.l_rec).abs() < 1e-12);
        assert!((ivc - b.l_ivc).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hinge_ordering(p in 0.0f64..5.0, h in 0.0f64..5.0, e in 0.0f64..5.0) {
            let l = ivc_forward(p, h, e, 0.1, 0.15).unwrap();
            prop_assert!(l >= 0.0);
            let satisfied = p + 0.15 <= e && p + 0.1 <= h;
            if satisfied {
                prop_assert_eq!(l, 0.0);
            }
            if p + 0.15 > e || p + 0.1 > h {
                prop_assert!(l > 0.0);
            }
            prop_assert!(ivc_total(l, 0.3) >= l.max(0.3));
        }

        #[test]
        fn hinge_subgradient(p in 0.0f64..5.0, h in 0.0f64..5.0, e in 0.0f64..5.0) {
            let a = p - h + 0.1;
            let b = p - e + 0.15;
            prop_assume!(a.abs() > 1e-3 && b.abs() > 1e-3);
            let eps = 1e-6;
            let fd = (ivc_forward(p + eps, h, e, 0.1, 0.15).unwrap()
                - ivc_forward(p - eps, h, e, 0.1, 0.15).unwrap()) / (2.0 * eps);
            let expected = (a > 0.0) as u8 as f64 + (b > 0.0) as u8 as f64;
            prop_assert!((fd - expected).abs() < 1e-6);
        }

        #[test]
        fn ce_is_non_negative(probs in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 3)) {
            let dist: Vec<Vec<f64>> = probs
                .iter()
                .map(|r| {
                    let z: f64 = r.iter().sum::<f64>() + 1e-9;
                    r.iter().map(|x| x / z).collect()
                })
                .collect();
            let ce = reconstruction_ce(&dist, &target(&[0, 3, 2], 3)).unwrap();
            prop_assert!(ce >= 0.0);
        }
    }
}
