//! Supervision terms and their weighted combination.
//!
//! Every term is mean-reduced and exposed twice: as a plain function of
//! tensors, and as a fused node on a [`Tape`] whose input gradients are
//! computed analytically alongside the value.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{CdaOutput, ForwardVars, Variant};
use crate::tensor::Tensor;
use crate::volume_io::{ChannelMapStack, MapRole};

pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Segmentation (generalized Dice).
    pub lambda_seg: f64,
    /// Contour BCE.
    pub lambda_contour: f64,
    /// Distance-transform MSE.
    pub lambda_distance: f64,
    /// Contour/distance penalty energy.
    pub lambda_penalty: f64,
    pub bce_background_weight: f64,
    pub bce_contour_weight: f64,
    pub gd_epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 1.0,
            lambda_contour: 20.0,
            lambda_distance: 10.0,
            lambda_penalty: 1.0,
            bce_background_weight: 0.001,
            bce_contour_weight: 0.999,
            gd_epsilon: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_seg,
            self.lambda_contour,
            self.lambda_distance,
            self.lambda_penalty,
            self.bce_background_weight,
            self.bce_contour_weight,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {all:?}")));
        }
        if ((self.bce_background_weight + self.bce_contour_weight) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("BCE class weights must sum to 1".into()));
        }
        if !(self.gd_epsilon > 0.0 && self.gd_epsilon.is_finite()) {
            return Err(Error::Config("gd_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// A scalar and its gradient with respect to each input.
struct Term {
    value: f64,
    grads: Vec<Tensor>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn bce_term(logits: &Tensor, gt: &Tensor, w: &LossWeights) -> Term {
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, &z), &y) in grad.data_mut().iter_mut().zip(logits.data()).zip(gt.data()) {
        let p = sigmoid(z);
        let q = sigmoid(-z);
        let (wf, wb) = (w.bce_contour_weight * y, w.bce_background_weight * (1.0 - y));
        value -= wf * p.max(LOG_CLAMP).ln() + wb * q.max(LOG_CLAMP).ln();
        let mut d = 0.0;
        if p > LOG_CLAMP {
            d -= wf * q;
        }
        if q > LOG_CLAMP {
            d += wb * p;
        }
        *g = d / n;
    }
    Term {
        value: value / n,
        grads: vec![grad],
    }
}

fn mse_term(pred: &Tensor, gt: &Tensor) -> Term {
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(gt.data()) {
        value += (p - y) * (p - y);
        *g = 2.0 * (p - y) / n;
    }
    Term {
        value: value / n,
        grads: vec![grad],
    }
}

fn penalty_term(contour_logits: &Tensor, dt_pred: &Tensor) -> Term {
    let n = contour_logits.len() as f64;
    let mut value = 0.0;
    let mut gc = Tensor::zeros(contour_logits.shape());
    let mut gd = Tensor::zeros(dt_pred.shape());
    let it = gc.data_mut().iter_mut().zip(gd.data_mut()).zip(contour_logits.data()).zip(dt_pred.data());
    for (((gc, gd), &c), &d) in it {
        let s = sigmoid(c);
        let bg = 1.0 - d.clamp(0.0, 1.0);
        value += s * bg;
        *gc = s * (1.0 - s) * bg / n;
        *gd = if d > 0.0 && d < 1.0 { -s / n } else { 0.0 };
    }
    Term {
        value: value / n,
        grads: vec![gc, gd],
    }
}

fn gd_term(probs: &Tensor, onehot: &Tensor, eps: f64) -> Term {
    let c = probs.shape()[0];
    let weights: Vec<f64> = (0..c)
        .map(|ci| {
            let s: f64 = onehot.channel(ci).iter().sum();
            1.0 / (s * s + eps)
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (ci, &wc) in weights.iter().enumerate() {
        let (p, r) = (probs.channel(ci), onehot.channel(ci));
        num += wc * p.iter().zip(r).map(|(p, r)| p * r).sum::<f64>();
        den += wc * p.iter().zip(r).map(|(p, r)| p + r).sum::<f64>();
    }
    let mut grad = Tensor::zeros(probs.shape());
    if den == 0.0 {
        return Term {
            value: 0.0,
            grads: vec![grad],
        };
    }
    for (ci, &wc) in weights.iter().enumerate() {
        let r = onehot.channel(ci);
        for (g, &rv) in grad.channel_mut(ci).iter_mut().zip(r) {
            *g = -2.0 * wc * (rv * den - num) / (den * den);
        }
    }
    Term {
        value: 1.0 - 2.0 * num / den,
        grads: vec![grad],
    }
}

fn check(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    a.ensure_same_shape(b, what)
}

/// Class-weighted binary cross-entropy on contour logits.
pub fn weighted_bce(contour_logits: &Tensor, gt: &ChannelMapStack, w: &LossWeights) -> Result<f64> {
    gt.expect_role(MapRole::Contour)?;
    check(contour_logits, gt.values(), "contour BCE")?;
    Ok(bce_term(contour_logits, gt.values(), w).value)
}

pub fn mse_dt(dt_pred: &Tensor, gt: &ChannelMapStack) -> Result<f64> {
    gt.expect_role(MapRole::Distance)?;
    check(dt_pred, gt.values(), "distance MSE")?;
    Ok(mse_term(dt_pred, gt.values()).value)
}

/// Mean of `sigmoid(contour) * (1 - clamp(dt, 0, 1))`.
pub fn penalty_energy(contour_logits: &Tensor, dt_pred: &Tensor) -> Result<f64> {
    check(contour_logits, dt_pred, "penalty energy")?;
    Ok(penalty_term(contour_logits, dt_pred).value)
}

/// Generalized Dice loss over all channels (background included).
pub fn generalized_dice(probs: &ChannelMapStack, onehot: &ChannelMapStack, eps: f64) -> Result<f64> {
    probs.expect_role(MapRole::Probability)?;
    onehot.expect_role(MapRole::OneHot)?;
    check(probs.values(), onehot.values(), "generalized Dice")?;
    Ok(gd_term(probs.values(), onehot.values(), eps).value)
}

fn push(t: &mut Tape, inputs: &[Var], term: Term) -> Var {
    t.fused_scalar(inputs, term.value, term.grads)
}

pub fn tape_bce(t: &mut Tape, contour_logits: Var, gt: &ChannelMapStack, w: &LossWeights) -> Result<Var> {
    gt.expect_role(MapRole::Contour)?;
    check(t.value(contour_logits), gt.values(), "contour BCE")?;
    let term = bce_term(t.value(contour_logits), gt.values(), w);
    Ok(push(t, &[contour_logits], term))
}

pub fn tape_mse(t: &mut Tape, dt_pred: Var, gt: &ChannelMapStack) -> Result<Var> {
    gt.expect_role(MapRole::Distance)?;
    check(t.value(dt_pred), gt.values(), "distance MSE")?;
    let term = mse_term(t.value(dt_pred), gt.values());
    Ok(push(t, &[dt_pred], term))
}

pub fn tape_penalty(t: &mut Tape, contour_logits: Var, dt_pred: Var) -> Result<Var> {
    check(t.value(contour_logits), t.value(dt_pred), "penalty energy")?;
    let term = penalty_term(t.value(contour_logits), t.value(dt_pred));
    Ok(push(t, &[contour_logits, dt_pred], term))
}

/// Generalized Dice on softmax probabilities given as a tape node.
pub fn tape_generalized_dice(t: &mut Tape, probs: Var, onehot: &ChannelMapStack, eps: f64) -> Result<Var> {
    onehot.expect_role(MapRole::OneHot)?;
    check(t.value(probs), onehot.values(), "generalized Dice")?;
    let term = gd_term(t.value(probs), onehot.values(), eps);
    Ok(push(t, &[probs], term))
}

/// Supervision for one case.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// One-hot segmentation including the background channel.
    pub onehot: ChannelMapStack,
    /// Per-structure contours (no background channel).
    pub contour: Option<ChannelMapStack>,
    /// Per-structure foreground distance transforms.
    pub distance: Option<ChannelMapStack>,
}

/// Unweighted term values; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub contour: Option<f64>,
    pub distance: Option<f64>,
    pub penalty: Option<f64>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [Some(self.total), Some(self.seg), self.contour, self.distance, self.penalty]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "L={:.6} L_O={:.6} L_C={} L_DT={} E_p={}",
            self.total,
            self.seg,
            opt(self.contour),
            opt(self.distance),
            opt(self.penalty)
        )
    }
}

/// `L = λ1 L_O + λ2 L_C + λ3 L_DT + λ4 E_p` on the tape, with terms for
/// absent heads left out. The penalty is used by the penalty variant only.
pub fn total_loss(
    t: &mut Tape,
    out: &ForwardVars,
    targets: &LossTargets,
    w: &LossWeights,
    variant: Variant,
) -> Result<(Var, LossBreakdown)> {
    let missing = |what| Error::MissingTarget {
        variant: variant.to_string(),
        what,
    };
    let probs = t.softmax(out.seg_logits);
    let l_o = tape_generalized_dice(t, probs, &targets.onehot, w.gd_epsilon)?;
    let mut terms = vec![(l_o, w.lambda_seg)];
    let mut bd = LossBreakdown {
        seg: t.value(l_o).data()[0],
        ..Default::default()
    };
    if let Some(c) = out.contour_logits {
        let gt = targets.contour.as_ref().ok_or_else(|| missing("contour"))?;
        let l = tape_bce(t, c, gt, w)?;
        bd.contour = Some(t.value(l).data()[0]);
        terms.push((l, w.lambda_contour));
    }
    if let Some(d) = out.dt_pred {
        let gt = targets.distance.as_ref().ok_or_else(|| missing("distance"))?;
        let l = tape_mse(t, d, gt)?;
        bd.distance = Some(t.value(l).data()[0]);
        terms.push((l, w.lambda_distance));
    }
    if variant.has_penalty() {
        match (out.contour_logits, out.dt_pred) {
            (Some(c), Some(d)) => {
                let l = tape_penalty(t, c, d)?;
                bd.penalty = Some(t.value(l).data()[0]);
                terms.push((l, w.lambda_penalty));
            }
            _ => {
                return Err(Error::MissingHead {
                    variant: variant.to_string(),
                    head: "CTN/DTTN",
                })
            }
        }
    }
    let total = t.linear(&terms);
    bd.total = t.value(total).data()[0];
    Ok((total, bd))
}

/// [`total_loss`] evaluated on materialised outputs.
pub fn total_loss_value(out: &CdaOutput, targets: &LossTargets, w: &LossWeights, variant: Variant) -> Result<LossBreakdown> {
    let mut t = Tape::new();
    let seg = t.constant(out.seg_logits.values.clone());
    let contour = out.contour_logits.as_ref().map(|m| t.constant(m.values.clone()));
    let dt = out.dt_pred.as_ref().map(|m| t.constant(m.values.clone()));
    let vars = ForwardVars {
        seg_logits: seg,
        contour_logits: contour,
        dt_pred: dt,
        attention: None,
        backbone: crate::network::BackboneVars {
            low: seg,
            high: seg,
            dec: seg,
        },
    };
    Ok(total_loss(&mut t, &vars, targets, w, variant)?.1)
}
