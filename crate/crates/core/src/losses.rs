//! Preference losses: standard DPO, the target generation loss over
//! span-restricted responses, the target condition loss contrasting a clean
//! image against a noise-masked one, and their weighted combination.
//!
//! All losses share the implicit reward
//!
//! ```text
//! r(m, x, y) = β · Σ_i w_i · (log π_θ(y_i | m, x, y_<i) − log π_ref(y_i | m, x, y_<i))
//! ```
//!
//! where `w` is a 0/1 label mask (all ones for plain DPO). The partition
//! term of the closed-form reward cancels in every pairwise margin, so it is
//! never computed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Bound, GridImage, PolicyModel, ReferenceModel, Token};
use crate::numerics::{sigmoid, Graph, Tensor, Var};
use crate::targeting::{label_mask, SpanAnnotation};

/// Which tokens of the revised response the condition term scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionScope {
    /// Every token of the (truncated) revised response.
    #[default]
    Response,
    /// Only the target tokens, using the pair's label mask.
    Target,
}

/// Loss-side hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub w_t: f64,
    pub w_c: f64,
    pub noise_sigma: f64,
    pub condition_scope: ConditionScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            w_t: 1.0,
            w_c: 1.0,
            noise_sigma: 1.0,
            condition_scope: ConditionScope::Response,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be > 0"));
        }
        if !(self.w_t >= 0.0 && self.w_t.is_finite()) {
            return Err(Error::config("w_t", "must be >= 0"));
        }
        if !(self.w_c >= 0.0 && self.w_c.is_finite()) {
            return Err(Error::config("w_c", "must be >= 0"));
        }
        if self.w_t + self.w_c <= 0.0 {
            return Err(Error::config("w_c", "w_t + w_c must be > 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

/// A preferred/dispreferred response pair with optional per-token weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub image: GridImage,
    pub question: Vec<Token>,
    pub y_w: Vec<Token>,
    pub y_l: Vec<Token>,
    pub mask_w: Option<Vec<f64>>,
    pub mask_l: Option<Vec<f64>>,
    pub bbox: Option<BoundingBox>,
}

impl PreferencePair {
    pub fn new(image: GridImage, question: Vec<Token>, y_w: Vec<Token>, y_l: Vec<Token>) -> Self {
        Self {
            image,
            question,
            y_w,
            y_l,
            mask_w: None,
            mask_l: None,
            bbox: None,
        }
    }

    /// Restricts both responses to their target spans: non-target tokens get
    /// weight 0 and everything after the last span is dropped.
    ///
    /// `y_w` is the revised response (spans `spans_r`), `y_l` the
    /// hallucinated one (spans `spans_h`).
    pub fn target_restricted(
        image: GridImage,
        question: Vec<Token>,
        y_r: &[Token],
        y_h: &[Token],
        annotation: &SpanAnnotation,
        bbox: Option<BoundingBox>,
    ) -> Result<Self> {
        let mr = label_mask(y_r.len(), &annotation.spans_r)?;
        let mh = label_mask(y_h.len(), &annotation.spans_h)?;
        if mr.is_degenerate() && mh.is_degenerate() {
            return Err(Error::DegenerateTarget("both target masks are empty".into()));
        }
        // A lone zero-width span at position 0 truncates to nothing; keep one
        // zero-weight token so the response stays nonempty.
        let cut = |tokens: &[Token], mut weights: Vec<f64>, at: usize| {
            let keep = at.max(1);
            weights.resize(keep, 0.0);
            (tokens[..keep].to_vec(), weights)
        };
        let (y_w, mask_w) = cut(y_r, mr.weights, mr.truncate_at);
        let (y_l, mask_l) = cut(y_h, mh.weights, mh.truncate_at);
        Ok(Self {
            image,
            question,
            y_w,
            y_l,
            mask_w: Some(mask_w),
            mask_l: Some(mask_l),
            bbox,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            image: self.image.clone(),
            question: self.question.clone(),
            y_w: self.y_l.clone(),
            y_l: self.y_w.clone(),
            mask_w: self.mask_l.clone(),
            mask_l: self.mask_w.clone(),
            bbox: self.bbox,
        }
    }

    fn weights_w(&self) -> Vec<f64> {
        self.mask_w.clone().unwrap_or_else(|| vec![1.0; self.y_w.len()])
    }

    fn weights_l(&self) -> Vec<f64> {
        self.mask_l.clone().unwrap_or_else(|| vec![1.0; self.y_l.len()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_w.is_empty() || self.y_l.is_empty() {
            return Err(Error::Contract("responses must be nonempty".into()));
        }
        if let Some(m) = &self.mask_w {
            if m.len() != self.y_w.len() {
                return Err(Error::Contract("mask_w length differs from y_w".into()));
            }
        }
        if let Some(m) = &self.mask_l {
            if m.len() != self.y_l.len() {
                return Err(Error::Contract("mask_l length differs from y_l".into()));
            }
        }
        Ok(())
    }

    fn has_unit_masks(&self) -> bool {
        let ones = |m: &Option<Vec<f64>>| m.as_ref().is_none_or(|m| m.iter().all(|&w| w == 1.0));
        ones(&self.mask_w) && ones(&self.mask_l)
    }
}

/// Bradley–Terry probability that the response with reward `r_w` wins.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// A policy bound into a graph together with its frozen reference.
pub struct Scorer<'m> {
    policy: &'m PolicyModel,
    reference: &'m ReferenceModel,
    bound: Bound,
    beta: f64,
}

impl<'m> Scorer<'m> {
    /// Binds `policy` into `g`; with `trainable` its parameters become the
    /// graph's gradient targets.
    pub fn new(
        g: &mut Graph,
        policy: &'m PolicyModel,
        reference: &'m ReferenceModel,
        beta: f64,
        trainable: bool,
    ) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config("beta", "must be > 0"));
        }
        if !policy.config().same_architecture(reference.config()) {
            return Err(Error::Contract("policy and reference differ in architecture".into()));
        }
        Ok(Self {
            policy,
            reference,
            bound: policy.bind(g, trainable),
            beta,
        })
    }

    pub fn policy(&self) -> &PolicyModel {
        self.policy
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    /// `β·Σ_i w_i·(log π_θ − log π_ref)` for one response.
    pub fn reward(
        &self,
        g: &mut Graph,
        features: &Tensor,
        question: &[Token],
        response: &[Token],
        weights: &[f64],
    ) -> Result<Var> {
        let f = g.constant(features.clone());
        let pol = self
            .policy
            .masked_sequence_log_prob_var(g, &self.bound, f, question, response, weights)?;
        let r = self
            .reference
            .masked_sequence_log_prob_features(features, question, response, weights)?;
        let r = g.constant(Tensor::scalar(r));
        let diff = g.sub(pol, r)?;
        g.scale(diff, self.beta)
    }

    /// `u = r(x, y_w) − r(x, y_l)` with the pair's masks applied.
    pub fn margin(&self, g: &mut Graph, pair: &PreferencePair) -> Result<Var> {
        pair.validate()?;
        let features = self.policy.features(&pair.image)?;
        let rw = self.reward(g, &features, &pair.question, &pair.y_w, &pair.weights_w())?;
        let rl = self.reward(g, &features, &pair.question, &pair.y_l, &pair.weights_l())?;
        g.sub(rw, rl)
    }

    /// `−log σ(u)` for one pair.
    pub fn pair_loss(&self, g: &mut Graph, pair: &PreferencePair) -> Result<Var> {
        let u = self.margin(g, pair)?;
        neg_log_sigmoid(g, u)
    }

    /// Mean of `−log σ(u)` over a batch of unmasked pairs.
    pub fn dpo_loss(&self, g: &mut Graph, batch: &[PreferencePair]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("dpo_loss on an empty batch".into()));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for pair in batch {
            if !pair.has_unit_masks() {
                return Err(Error::Contract(
                    "dpo_loss expects unmasked pairs; use target_generation_loss".into(),
                ));
            }
            terms.push(self.pair_loss(g, pair)?);
        }
        mean_of(g, &terms)
    }

    /// DPO restricted to target spans. Both responses must carry masks and at
    /// least one mask must select a token.
    pub fn target_generation_loss(&self, g: &mut Graph, pair: &PreferencePair) -> Result<Var> {
        let (Some(mw), Some(ml)) = (&pair.mask_w, &pair.mask_l) else {
            return Err(Error::Contract("target_generation_loss needs target masks".into()));
        };
        if mw.iter().chain(ml).all(|&w| w == 0.0) {
            return Err(Error::DegenerateTarget("all target weights are zero".into()));
        }
        self.pair_loss(g, pair)
    }

    /// `−log σ(u*)` with `u* = r(m, x, y_r) − r(m̃, x, y_r)` over the full
    /// revised response.
    pub fn target_condition_loss(
        &self,
        g: &mut Graph,
        features: &Tensor,
        masked_features: &Tensor,
        question: &[Token],
        y_r: &[Token],
    ) -> Result<Var> {
        let u = self.condition_margin(g, features, masked_features, question, y_r)?;
        neg_log_sigmoid(g, u)
    }

    pub fn condition_margin(
        &self,
        g: &mut Graph,
        features: &Tensor,
        masked_features: &Tensor,
        question: &[Token],
        y_r: &[Token],
    ) -> Result<Var> {
        self.weighted_condition_margin(g, features, masked_features, question, y_r, &vec![1.0; y_r.len()])
    }

    /// [`Scorer::condition_margin`] with per-token weights on `y_r`.
    pub fn weighted_condition_margin(
        &self,
        g: &mut Graph,
        features: &Tensor,
        masked_features: &Tensor,
        question: &[Token],
        y_r: &[Token],
        weights: &[f64],
    ) -> Result<Var> {
        if features.shape() != masked_features.shape() {
            return Err(Error::Contract(format!(
                "masked image shape {:?} differs from image shape {:?}",
                masked_features.shape(),
                features.shape()
            )));
        }
        let clean = self.reward(g, features, question, y_r, weights)?;
        let masked = self.reward(g, masked_features, question, y_r, weights)?;
        g.sub(clean, masked)
    }

    /// `w_t·L_t + w_c·L_c`. `pair` is the target-restricted pair (revised
    /// response as `y_w`); the condition term scores the same truncated
    /// revised response against `masked_features`, over the tokens chosen by
    /// `cfg.condition_scope`.
    pub fn tl_dpo_loss(
        &self,
        g: &mut Graph,
        pair: &PreferencePair,
        masked_features: &Tensor,
        cfg: &LossConfig,
    ) -> Result<TlDpoTerms> {
        cfg.validate()?;
        let generation = self.target_generation_loss(g, pair)?;
        let features = self.policy.features(&pair.image)?;
        let condition = match cfg.condition_scope {
            ConditionScope::Response => {
                self.target_condition_loss(g, &features, masked_features, &pair.question, &pair.y_w)?
            }
            ConditionScope::Target => {
                let u = self.weighted_condition_margin(
                    g,
                    &features,
                    masked_features,
                    &pair.question,
                    &pair.y_w,
                    &pair.weights_w(),
                )?;
                neg_log_sigmoid(g, u)?
            }
        };
        let a = g.scale(generation, cfg.w_t)?;
        let b = g.scale(condition, cfg.w_c)?;
        let total = g.add(a, b)?;
        Ok(TlDpoTerms {
            generation,
            condition,
            total,
        })
    }
}

/// Graph nodes of the combined loss and its two components.
#[derive(Debug, Clone, Copy)]
pub struct TlDpoTerms {
    pub generation: Var,
    pub condition: Var,
    pub total: Var,
}

fn neg_log_sigmoid(g: &mut Graph, u: Var) -> Result<Var> {
    let ls = g.log_sigmoid(u)?;
    g.neg(ls)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Value of `reward` without gradient tracking.
pub fn reward_log_ratio(
    policy: &PolicyModel,
    reference: &ReferenceModel,
    image: &GridImage,
    question: &[Token],
    response: &[Token],
    weights: &[f64],
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = Scorer::new(&mut g, policy, reference, beta, false)?;
    let features = policy.features(image)?;
    let r = s.reward(&mut g, &features, question, response, weights)?;
    g.value(r).item()
}

pub fn margin_u(
    policy: &PolicyModel,
    reference: &ReferenceModel,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = Scorer::new(&mut g, policy, reference, beta, false)?;
    let u = s.margin(&mut g, pair)?;
    g.value(u).item()
}

/// Evaluates a loss built by `build` and returns its value together with the
/// gradient for every policy parameter.
pub fn value_and_grad<F>(
    policy: &PolicyModel,
    reference: &ReferenceModel,
    beta: f64,
    build: F,
) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&Scorer<'_>, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let s = Scorer::new(&mut g, policy, reference, beta, true)?;
    let loss = build(&s, &mut g)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?.params(&g);
    Ok((value, grads))
}

/// Evaluates a loss without gradients.
pub fn value_of<F>(policy: &PolicyModel, reference: &ReferenceModel, beta: f64, build: F) -> Result<f64>
where
    F: FnOnce(&Scorer<'_>, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let s = Scorer::new(&mut g, policy, reference, beta, false)?;
    let loss = build(&s, &mut g)?;
    g.value(loss).item()
}
