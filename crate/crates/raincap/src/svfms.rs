//! Semantic visual feature matching.
//!
//! Adapts a fresh *source* image encoder (plus the reconstruction
//! estimators it feeds on) so that its features on reconstructed images
//! match a frozen *target* encoder's features on the clean originals. The
//! caption decoder never retrains: once source features line up with
//! target features, the decoder reads reconstructed scenes as if they were
//! clean. The module also provides the four encoder routings used when
//! comparing captions on degraded inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::captioner::{
    caption_greedy_from_grid, encode, encode_graph, CaptionerError, CaptionerModel, EncoderModel,
    FeatureGrid,
};
use crate::decomp::{self, DecompError};
use crate::gradcore::{
    AdamConfig, Binding, Element, GradError, Graph, OptimizerState, Shape, TensorId,
};
use crate::irs::{derain, irs_outputs_graph, IrsError, IrsModel};
use crate::rainmodel::{Image, T_MIN};

/// Checkpoint prefix of the adapted source encoder.
pub const SOURCE_PREFIX: &str = "svfm.source";

/// Errors for the feature-matching stage.
#[derive(Debug, Error)]
pub enum SvfmError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("pair {index}: degraded image is {dh}x{dw} but clean image is {ch}x{cw}")]
    MismatchedPair {
        index: usize,
        dh: usize,
        dw: usize,
        ch: usize,
        cw: usize,
    },
    #[error("feature grids differ in shape: {0}x{1}x{2} vs {3}x{4}x{5}")]
    FeatureShape(usize, usize, usize, usize, usize, usize),
    #[error("mode {0} needs a model that was not provided")]
    MissingModel(EvalMode),
    #[error(transparent)]
    Irs(#[from] IrsError),
    #[error(transparent)]
    Captioner(#[from] CaptionerError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Graph(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, SvfmError>;

// ---------------------------------------------------------------------------
// Reconstruction inside the graph
// ---------------------------------------------------------------------------

/// Wires the three estimators and the algebraic degradation inverse into an
/// existing graph, so gradients flow from whatever consumes the
/// reconstruction back into all three estimator networks. `rained` is the
/// degraded `[N,3,H,W]` tensor; `base` and `detail` are its smoothed and
/// residual components, computed outside the graph (the splitting filter is
/// fixed, not learned). The transmission estimate is floored at the same
/// value the plain inverse uses before dividing.
pub fn reconstruct_graph<T: Element>(
    g: &mut Graph<T>,
    irs: &IrsModel,
    binding: &Binding,
    rained: TensorId,
    base: TensorId,
    detail: TensorId,
) -> Result<TensorId> {
    let (a_hat, t_hat, s_hat) = irs_outputs_graph(g, irs, binding, base, detail)?;
    let t = g.clamp_min(t_hat, T_MIN as f64);
    let neg_t = g.scale(t, -1.0);
    let one_minus_t = g.add_scalar(neg_t, 1.0);
    let veil = g.mul(a_hat, one_minus_t)?;
    let lifted = g.sub(rained, veil)?;
    let radiance = g.div(lifted, t)?;
    Ok(g.sub(radiance, s_hat)?)
}

/// Restores one degraded image through the graph path. Matches
/// [`derain`] numerically; it exists so callers exercise the same code the
/// end-to-end training differentiates.
pub fn reconstruct(image: &Image, irs: &IrsModel) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let pair = decomp::decompose(image, decomp::DEFAULT_RADIUS, decomp::DEFAULT_EPS)?;
    let mut g: Graph<f32> = Graph::new();
    let binding = irs.store().bind(&mut g, true);
    let sh = Shape::new(&[1, 3, h, w]);
    let rained = g.leaf(sh.clone(), image.data().to_vec(), false)?;
    let base = g.leaf(sh.clone(), pair.base.data().to_vec(), false)?;
    let detail = g.leaf(sh, pair.detail.data().to_vec(), false)?;
    let out = reconstruct_graph(&mut g, irs, &binding, rained, base, detail)?;
    Ok(Image::new(h, w, g.data(out).to_vec()))
}

// ---------------------------------------------------------------------------
// Feature extraction and the matching loss
// ---------------------------------------------------------------------------

/// Runs both frozen trunks: source features of the reconstruction, target
/// features of the clean image. The two images must cover the same scene
/// extents; both grids come out `[L, D]` and the target grid carries no
/// gradient anywhere in this module.
pub fn extract_features(
    reconstruction: &Image,
    clean: &Image,
    source: &EncoderModel,
    target: &EncoderModel,
) -> Result<(FeatureGrid, FeatureGrid)> {
    if (reconstruction.height(), reconstruction.width()) != (clean.height(), clean.width()) {
        return Err(SvfmError::MismatchedPair {
            index: 0,
            dh: reconstruction.height(),
            dw: reconstruction.width(),
            ch: clean.height(),
            cw: clean.width(),
        });
    }
    let f_s = encode(reconstruction, source)?;
    let f_t = encode(clean, target)?;
    Ok((f_s, f_t))
}

/// Mean absolute difference between two feature grids.
pub fn svfm_loss(f_s: &FeatureGrid, f_t: &FeatureGrid) -> Result<f32> {
    if (f_s.grid_h, f_s.grid_w, f_s.dim) != (f_t.grid_h, f_t.grid_w, f_t.dim)
        || f_s.data.len() != f_t.data.len()
    {
        return Err(SvfmError::FeatureShape(
            f_s.grid_h, f_s.grid_w, f_s.dim, f_t.grid_h, f_t.grid_w, f_t.dim,
        ));
    }
    let sum: f64 = f_s
        .data
        .iter()
        .zip(&f_t.data)
        .map(|(&a, &b)| (a - b).abs() as f64)
        .sum();
    Ok((sum / f_s.data.len() as f64) as f32)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// The adapted encoder: reconstruction estimators plus the source trunk
/// that reads their output. Both halves train together; the trunk layout is
/// identical to the target encoder's by construction.
#[derive(Debug, Clone)]
pub struct ProposedEncoder {
    pub irs: IrsModel,
    pub source: EncoderModel,
}

impl ProposedEncoder {
    /// Reconstructs, then encodes with the source trunk.
    pub fn features(&self, image: &Image) -> Result<FeatureGrid> {
        let restored = reconstruct(image, &self.irs)?;
        Ok(encode(&restored, &self.source)?)
    }
}

/// Training schedule for the matching stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SvfmTrainConfig {
    /// Upper bound on how many (degraded, clean) pairs are used.
    pub pairs: usize,
    pub epochs: usize,
    /// Images per optimisation step.
    pub batch: usize,
    pub learning_rate: f32,
}

impl SvfmTrainConfig {
    /// Small configuration sized for tests and laptop runs.
    pub fn desk() -> Self {
        Self {
            pairs: 50,
            epochs: 30,
            batch: 4,
            learning_rate: 1e-3,
        }
    }

    /// Full-scale reference configuration (documented, not exercised by the
    /// test suite): 80,000 pairs of degraded and clean images.
    pub fn full_scale_reference() -> Self {
        Self {
            pairs: 80_000,
            epochs: 30,
            batch: 4,
            learning_rate: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(SvfmError::InvalidConfig(
                "pairs, epochs, and batch must all be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SvfmError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A trained adapted encoder plus its per-epoch mean matching loss.
#[derive(Debug, Clone)]
pub struct SvfmTrainOutcome {
    pub model: ProposedEncoder,
    pub loss_history: Vec<f32>,
}

/// A directly-matched source encoder (no reconstruction) plus its history.
#[derive(Debug, Clone)]
pub struct DirectMatchOutcome {
    pub encoder: EncoderModel,
    pub loss_history: Vec<f32>,
}

struct PreparedPairs<'a> {
    pairs: &'a [(Image, Image)],
    decomposed: Vec<decomp::BaseDetailPair>,
    target_features: Vec<FeatureGrid>,
}

/// Validates the dataset and caches everything the step loop reuses: the
/// base/detail split of each degraded image and the frozen target features
/// of each clean image.
fn prepare_pairs<'a>(
    pairs: &'a [(Image, Image)],
    target: &EncoderModel,
    limit: usize,
    split: bool,
) -> Result<PreparedPairs<'a>> {
    if pairs.is_empty() {
        return Err(SvfmError::EmptyDataset);
    }
    let used = &pairs[..pairs.len().min(limit)];
    let mut decomposed = Vec::with_capacity(if split { used.len() } else { 0 });
    let mut target_features = Vec::with_capacity(used.len());
    for (index, (rained, clean)) in used.iter().enumerate() {
        if (rained.height(), rained.width()) != (clean.height(), clean.width()) {
            return Err(SvfmError::MismatchedPair {
                index,
                dh: rained.height(),
                dw: rained.width(),
                ch: clean.height(),
                cw: clean.width(),
            });
        }
        if split {
            decomposed.push(decomp::decompose(
                rained,
                decomp::DEFAULT_RADIUS,
                decomp::DEFAULT_EPS,
            )?);
        }
        target_features.push(encode(clean, target)?);
    }
    Ok(PreparedPairs {
        pairs: used,
        decomposed,
        target_features,
    })
}

/// Leaf holding one cached target feature grid, gradient-free.
fn grid_leaf(g: &mut Graph<f32>, grid: &FeatureGrid) -> Result<TensorId> {
    Ok(g.leaf(
        Shape::new(&[grid.len(), grid.dim]),
        grid.data.clone(),
        false,
    )?)
}

/// Adapts a fresh source encoder end-to-end through the reconstruction:
/// every step samples a batch, rebuilds the graph from the degraded images
/// through the estimators, the inverse, and the source trunk, and applies
/// one Adam update to the estimator and trunk parameters. The target
/// encoder only ever supplies constant feature grids, so its parameters
/// cannot change. The estimators start from `init_irs` (a pretrained guide)
/// and keep learning. Deterministic for a fixed `(pairs, cfg, seed)`.
pub fn train_svfm(
    pairs: &[(Image, Image)],
    target: &EncoderModel,
    init_irs: &IrsModel,
    cfg: &SvfmTrainConfig,
    seed: u64,
) -> Result<SvfmTrainOutcome> {
    cfg.validate()?;
    let prep = prepare_pairs(pairs, target, cfg.pairs, true)?;
    let mut model = ProposedEncoder {
        irs: init_irs.clone(),
        source: EncoderModel::init(SOURCE_PREFIX, seed),
    };
    let mut optim_irs = OptimizerState::new(
        model.irs.store(),
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut optim_src = OptimizerState::new(
        model.source.store(),
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5F3A_7C4E);
    let steps_per_epoch = prep.pairs.len().div_ceil(cfg.batch);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        for _ in 0..steps_per_epoch {
            let mut g: Graph<f32> = Graph::new();
            let irs_binding = model.irs.store().bind(&mut g, false);
            let src_binding = model.source.store().bind(&mut g, false);
            let mut matched = Vec::with_capacity(cfg.batch);
            let mut targets = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let i = rng.gen_range(0..prep.pairs.len());
                let (rained, _) = &prep.pairs[i];
                let (h, w) = (rained.height(), rained.width());
                let sh = Shape::new(&[1, 3, h, w]);
                let rained_t = g.leaf(sh.clone(), rained.data().to_vec(), false)?;
                let base_t = g.leaf(sh.clone(), prep.decomposed[i].base.data().to_vec(), false)?;
                let detail_t = g.leaf(sh, prep.decomposed[i].detail.data().to_vec(), false)?;
                let restored = reconstruct_graph(
                    &mut g,
                    &model.irs,
                    &irs_binding,
                    rained_t,
                    base_t,
                    detail_t,
                )?;
                matched.push(encode_graph(&mut g, &model.source, &src_binding, restored)?);
                targets.push(grid_leaf(&mut g, &prep.target_features[i])?);
            }
            let f_s = g.concat(&matched, 0)?;
            let f_t = g.concat(&targets, 0)?;
            let loss = g.l1_loss(f_s, f_t)?;
            g.backward(loss)?;
            let grads_irs = irs_binding.grads(&mut g, model.irs.store());
            let grads_src = src_binding.grads(&mut g, model.source.store());
            optim_irs.step(model.irs.store_mut(), &grads_irs)?;
            optim_src.step(model.source.store_mut(), &grads_src)?;
            epoch_loss += g.value(loss) as f64;
        }
        history.push((epoch_loss / steps_per_epoch as f64) as f32);
    }
    Ok(SvfmTrainOutcome {
        model,
        loss_history: history,
    })
}

/// Ablation baseline: adapts a fresh source encoder against the same frozen
/// target features, but reading the degraded images directly — no
/// estimators, no inverse. Everything else (loss, schedule, determinism)
/// matches [`train_svfm`] so comparisons isolate the reconstruction stage.
pub fn train_nic_s(
    pairs: &[(Image, Image)],
    target: &EncoderModel,
    cfg: &SvfmTrainConfig,
    seed: u64,
) -> Result<DirectMatchOutcome> {
    cfg.validate()?;
    let prep = prepare_pairs(pairs, target, cfg.pairs, false)?;
    let mut source = EncoderModel::init(SOURCE_PREFIX, seed);
    let mut optim = OptimizerState::new(
        source.store(),
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5F3A_7C4E);
    let steps_per_epoch = prep.pairs.len().div_ceil(cfg.batch);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        for _ in 0..steps_per_epoch {
            let mut g: Graph<f32> = Graph::new();
            let binding = source.store().bind(&mut g, false);
            let mut matched = Vec::with_capacity(cfg.batch);
            let mut targets = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let i = rng.gen_range(0..prep.pairs.len());
                let (rained, _) = &prep.pairs[i];
                let (h, w) = (rained.height(), rained.width());
                let rained_t = g.leaf(Shape::new(&[1, 3, h, w]), rained.data().to_vec(), false)?;
                matched.push(encode_graph(&mut g, &source, &binding, rained_t)?);
                targets.push(grid_leaf(&mut g, &prep.target_features[i])?);
            }
            let f_s = g.concat(&matched, 0)?;
            let f_t = g.concat(&targets, 0)?;
            let loss = g.l1_loss(f_s, f_t)?;
            g.backward(loss)?;
            let grads = binding.grads(&mut g, source.store());
            optim.step(source.store_mut(), &grads)?;
            epoch_loss += g.value(loss) as f64;
        }
        history.push((epoch_loss / steps_per_epoch as f64) as f32);
    }
    Ok(DirectMatchOutcome {
        encoder: source,
        loss_history: history,
    })
}

/// Mean matching loss of the adapted encoder over a pair set.
pub fn svfm_eval_mean(
    pairs: &[(Image, Image)],
    proposed: &ProposedEncoder,
    target: &EncoderModel,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SvfmError::EmptyDataset);
    }
    let mut sum = 0.0f64;
    for (rained, clean) in pairs {
        let f_s = proposed.features(rained)?;
        let f_t = encode(clean, target)?;
        sum += svfm_loss(&f_s, &f_t)? as f64;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean matching loss of an encoder reading the degraded images directly.
pub fn direct_eval_mean(
    pairs: &[(Image, Image)],
    source: &EncoderModel,
    target: &EncoderModel,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SvfmError::EmptyDataset);
    }
    let mut sum = 0.0f64;
    for (rained, clean) in pairs {
        let f_s = encode(rained, source)?;
        let f_t = encode(clean, target)?;
        sum += svfm_loss(&f_s, &f_t)? as f64;
    }
    Ok(sum / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// Evaluation routings
// ---------------------------------------------------------------------------

/// The four encoder routings compared on degraded inputs. Every mode feeds
/// the same frozen attention and decoder; only the feature path differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Degraded image straight into the target encoder.
    NicT,
    /// Degraded image into the directly-matched source encoder.
    NicS,
    /// Restored image into the target encoder.
    NicTD,
    /// Degraded image through reconstruction into the adapted source
    /// encoder.
    Proposed,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [
        EvalMode::NicT,
        EvalMode::NicS,
        EvalMode::NicTD,
        EvalMode::Proposed,
    ];
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::NicT => "NIC_T",
            EvalMode::NicS => "NIC_S",
            EvalMode::NicTD => "NIC_T(D)",
            EvalMode::Proposed => "Proposed",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nic_t" => Ok(EvalMode::NicT),
            "nic_s" => Ok(EvalMode::NicS),
            "nic_t_d" => Ok(EvalMode::NicTD),
            "proposed" => Ok(EvalMode::Proposed),
            other => Err(format!(
                "unknown mode {other:?}; expected nic_t, nic_s, nic_t_d, or proposed"
            )),
        }
    }
}

/// Everything a routed captioning run may need. The captioner supplies the
/// target encoder and the shared frozen attention and decoder; the optional
/// models cover the modes that use them.
#[derive(Debug, Clone)]
pub struct ModeModels {
    pub captioner: CaptionerModel,
    pub irs: Option<IrsModel>,
    pub nic_s: Option<EncoderModel>,
    pub proposed: Option<ProposedEncoder>,
}

/// Encodes `image` along the requested routing and greedily decodes with
/// the shared attention and decoder.
pub fn caption_with_mode(
    image: &Image,
    mode: EvalMode,
    models: &ModeModels,
) -> Result<Vec<String>> {
    let grid = match mode {
        EvalMode::NicT => encode(image, &models.captioner.enc)?,
        EvalMode::NicS => {
            let source = models.nic_s.as_ref().ok_or(SvfmError::MissingModel(mode))?;
            encode(image, source)?
        }
        EvalMode::NicTD => {
            let irs = models.irs.as_ref().ok_or(SvfmError::MissingModel(mode))?;
            let restored = derain(image, irs)?;
            encode(&restored, &models.captioner.enc)?
        }
        EvalMode::Proposed => {
            let proposed = models
                .proposed
                .as_ref()
                .ok_or(SvfmError::MissingModel(mode))?;
            proposed.features(image)?
        }
    };
    Ok(caption_greedy_from_grid(&grid, &models.captioner)?)
}
