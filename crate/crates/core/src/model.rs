//! The full localizer: shared encoder, click-conditioned fusion and detection head.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, SwinEncoder};
use crate::error::{Error, Result};
use crate::fusion::{ClickPrompt, FusionConfig, FusionOutput, QueryFusion};
use crate::gmoe::{GateRecord, GmoeConfig, LayerRouting};
use crate::head::{build_targets, decode_prediction, BBox, BnUse, DetectionHead, HeadConfig, HeadOutput, Prediction, SigmaMode, TargetMaps};
use crate::nn::{Fwd, RunningStats};
use crate::objectives::{bbox_l1_loss, entropy_term, heatmap_loss, total_loss, FocalParams, LossParts, LossWeights};
use crate::ops::BnStats;
use crate::optim::{clip_grad_norm, Adam};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gmoe: GmoeConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub focal: FocalParams,
    pub loss: LossWeights,
    pub sigma: SigmaMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gmoe.validate()?;
        self.fusion.validate()?;
        self.loss.validate()?;
        if self.head.hidden == 0 || !(0.0..=1.0).contains(&self.head.bn_momentum) {
            return Err(Error::Config(format!("invalid head settings {:?}", self.head)));
        }
        if self.focal.gamma < 0.0 || self.focal.beta < 0.0 {
            return Err(Error::Config(format!("focal exponents must be >= 0, got {:?}", self.focal)));
        }
        Ok(())
    }
}

/// Parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParamStore,
    pub bn: Vec<RunningStats>,
}

/// A batch of query/reference image pairs with their clicks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, 3, Hq, Wq]`.
    pub query: Tensor,
    /// `[B, 3, Hr, Wr]`.
    pub reference: Tensor,
    pub clicks: Vec<ClickPrompt>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.clicks.len()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub head: HeadOutput,
    pub fusion: FusionOutput,
    pub gates: Vec<GateRecord>,
    pub bn_stats: Vec<BnStats>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub parts: LossParts,
}

/// Scalar summary of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub heatmap: f64,
    pub bbox: f64,
    /// Mean `Σ g ln g` over routed grids (negative entropy).
    pub entropy_term: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub gates: Vec<LayerRouting>,
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub predictions: Vec<Prediction>,
    /// Routing records when activation logging was requested.
    pub gates: Option<Vec<GateRecord>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: SwinEncoder,
    pub fusion: QueryFusion,
    pub head: DetectionHead,
}

impl Model {
    /// Builds the model with parameters drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ModelState)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let encoder = SwinEncoder::new(&mut store, &mut init, &cfg.backbone, &cfg.gmoe)?;
        let c = cfg.backbone.channels(cfg.fusion.stage);
        let fusion = QueryFusion::new(&mut store, &mut init, "fusion", c, &cfg.fusion);
        let head = DetectionHead::new(&mut store, &mut init, "head", c, &cfg.head);
        let bn = DetectionHead::running_stats(&cfg.head);
        let model = Self { cfg: cfg.clone(), encoder, fusion, head };
        Ok((model, ModelState { params: store, bn }))
    }

    /// Heatmap extent `(H', W')` on the reference image.
    pub fn feature_extent(&self) -> (usize, usize) {
        let (h, w) = self.cfg.backbone.reference_extent;
        let s = self.cfg.backbone.stage_shapes(h, w).expect("validated extents")[self.cfg.fusion.stage];
        (s.h, s.w)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let b = batch.size();
        let (qh, qw) = self.cfg.backbone.query_extent;
        let (rh, rw) = self.cfg.backbone.reference_extent;
        let ch = self.cfg.backbone.in_chans;
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if batch.query.shape() != [b, ch, qh, qw] {
            return Err(Error::Shape(format!("query batch {:?}, expected {:?}", batch.query.shape(), [b, ch, qh, qw])));
        }
        if batch.reference.shape() != [b, ch, rh, rw] {
            return Err(Error::Shape(format!(
                "reference batch {:?}, expected {:?}",
                batch.reference.shape(),
                [b, ch, rh, rw]
            )));
        }
        for c in &batch.clicks {
            c.validate(qh, qw)?;
        }
        Ok(())
    }

    pub fn forward(&self, f: &mut Fwd<'_>, batch: &Batch, bn: BnUse<'_>) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let q = f.tape.constant(batch.query.clone());
        let r = f.tape.constant(batch.reference.clone());
        let mut gates = Vec::new();
        let (fq, fr) = self.encoder.encode_pair(f, q, r, &mut gates)?;
        let s = self.cfg.fusion.stage;
        let fusion = self.fusion.forward(f, fq.stages[s], fr.stages[s], &batch.clicks, self.cfg.backbone.query_extent)?;
        let (head, bn_stats) = self.head.forward(f, fusion.fused, bn)?;
        Ok(ForwardOutput { head, fusion, gates, bn_stats })
    }

    pub fn targets(&self, gts: &[BBox]) -> Result<Vec<TargetMaps>> {
        let (rh, rw) = self.cfg.backbone.reference_extent;
        let feat = self.feature_extent();
        gts.iter().map(|g| build_targets(g, (rh, rw), feat, self.cfg.sigma)).collect()
    }

    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, targets: &[TargetMaps]) -> Result<LossOutput> {
        let named = |name: &'static str| move |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss(name),
            other => other,
        };
        let heatmap = heatmap_loss(tape, &out.head, targets, self.cfg.focal).map_err(named("heatmap"))?;
        let bbox = bbox_l1_loss(tape, &out.head, targets).map_err(named("bbox"))?;
        let entropy = entropy_term(tape, &out.gates, self.cfg.gmoe.entropy_mode).map_err(named("entropy"))?;
        let parts = LossParts { heatmap, bbox, entropy };
        let total = total_loss(tape, parts, self.cfg.loss)?;
        Ok(LossOutput { total, parts })
    }

    /// Loss value on a batch without touching parameters (batch statistics in the head).
    pub fn eval_loss(&self, state: &ModelState, batch: &Batch, gts: &[BBox]) -> Result<f64> {
        let targets = self.targets(gts)?;
        let mut tape = Tape::new();
        let bind = state.params.bind(&mut tape, false);
        let mut f = Fwd { tape: &mut tape, bind: &bind };
        let out = self.forward(&mut f, batch, BnUse::Train)?;
        let l = self.loss(f.tape, &out, &targets)?;
        tape.value(l.total).item()
    }

    /// Forward, backward, clipping and one Adam update at learning rate `lr`.
    pub fn train_step(
        &self,
        state: &mut ModelState,
        opt: &mut Adam,
        batch: &Batch,
        gts: &[BBox],
        lr: f64,
        clip: Option<f64>,
    ) -> Result<StepStats> {
        if gts.len() != batch.size() {
            return Err(Error::Input(format!("{} boxes for a batch of {}", gts.len(), batch.size())));
        }
        let targets = self.targets(gts)?;
        let mut tape = Tape::new();
        let bind = state.params.bind(&mut tape, true);
        let mut f = Fwd { tape: &mut tape, bind: &bind };
        let out = self.forward(&mut f, batch, BnUse::Train)?;
        let l = self.loss(f.tape, &out, &targets)?;
        let scalar = |t: &Tape, v: Var| t.value(v).item();
        let stats_loss = scalar(&tape, l.total)?;
        let heatmap = scalar(&tape, l.parts.heatmap)?;
        let bbox = scalar(&tape, l.parts.bbox)?;
        let entropy = l.parts.entropy.map(|e| scalar(&tape, e)).transpose()?;
        tape.backward(l.total)?;
        let mut grads = bind.grads(&tape);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss("gradient"));
        }
        let grad_norm = match clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>()),
        };
        opt.update(&mut state.params, &grads, lr)?;
        let count = out.head.batch * out.head.h * out.head.w;
        for (rs, s) in state.bn.iter_mut().zip(&out.bn_stats) {
            rs.update(s, count, self.cfg.head.bn_momentum);
        }
        Ok(StepStats {
            loss: stats_loss,
            heatmap,
            bbox,
            entropy_term: entropy,
            grad_norm,
            lr,
            gates: out.gates.iter().map(GateRecord::routing).collect(),
        })
    }

    /// Inference with frozen statistics; one decoded prediction per sample.
    pub fn predict(&self, state: &ModelState, batch: &Batch, log_activations: bool) -> Result<PredictOutput> {
        let mut tape = Tape::new();
        let bind = state.params.bind(&mut tape, false);
        let mut f = Fwd { tape: &mut tape, bind: &bind };
        let out = self.forward(&mut f, batch, BnUse::Infer(&state.bn))?;
        let (hf, wf) = (out.head.h, out.head.w);
        let n = hf * wf;
        let heat = tape.data(out.head.heat);
        let bbox = tape.data(out.head.bbox);
        let image = self.cfg.backbone.reference_extent;
        let predictions = (0..batch.size())
            .map(|b| decode_prediction(&heat[b * n..(b + 1) * n], &bbox[b * 4 * n..(b + 1) * 4 * n], (hf, wf), image))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictOutput { predictions, gates: log_activations.then_some(out.gates) })
    }

}
