//! Late fusion of image and point-cloud features: projection + concatenation,
//! single-token cross-attention, and the dual image-encoder (CCM) variant,
//! each followed by a classifier head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{CloudBatch, ImageEncoder, ImageEncoderConfig, PointEncoder, PointEncoderConfig};
use crate::numgrad::{Layer, LayerSpec, ParameterStore, Real, Session, Tensor, Var, DROPOUT_RATE};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelVariant {
    ImageOnly,
    CloudOnly,
    SimnetConcat,
    SimnetCaPc2img,
    SimnetCaImg2pc,
    SimnetBca,
    CcmFusion,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::ImageOnly,
        ModelVariant::CloudOnly,
        ModelVariant::SimnetConcat,
        ModelVariant::SimnetCaPc2img,
        ModelVariant::SimnetCaImg2pc,
        ModelVariant::SimnetBca,
        ModelVariant::CcmFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::ImageOnly => "image_only",
            ModelVariant::CloudOnly => "cloud_only",
            ModelVariant::SimnetConcat => "simnet_concat",
            ModelVariant::SimnetCaPc2img => "simnet_ca_pc2img",
            ModelVariant::SimnetCaImg2pc => "simnet_ca_img2pc",
            ModelVariant::SimnetBca => "simnet_bca",
            ModelVariant::CcmFusion => "ccm_fusion",
        }
    }

    /// Fusion config key, for the variants that fuse two modalities.
    pub fn fusion_key(self) -> Option<&'static str> {
        match self {
            ModelVariant::SimnetConcat => Some("concat"),
            ModelVariant::SimnetCaPc2img => Some("ca_pc2img"),
            ModelVariant::SimnetCaImg2pc => Some("ca_img2pc"),
            ModelVariant::SimnetBca => Some("bca"),
            ModelVariant::CcmFusion => Some("ccm"),
            ModelVariant::ImageOnly | ModelVariant::CloudOnly => None,
        }
    }

    pub fn uses_image(self) -> bool {
        self != ModelVariant::CloudOnly
    }

    pub fn uses_cloud(self) -> bool {
        !matches!(self, ModelVariant::ImageOnly | ModelVariant::CcmFusion)
    }

    pub fn uses_ccm(self) -> bool {
        self == ModelVariant::CcmFusion
    }

    pub fn attention(self) -> Option<AttentionDirection> {
        match self {
            ModelVariant::SimnetCaPc2img => Some(AttentionDirection::CloudQueriesImage),
            ModelVariant::SimnetCaImg2pc => Some(AttentionDirection::ImageQueriesCloud),
            ModelVariant::SimnetBca => Some(AttentionDirection::Bidirectional),
            _ => None,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<ModelVariant> for String {
    fn from(v: ModelVariant) -> String {
        v.name().to_owned()
    }
}

impl TryFrom<String> for ModelVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    /// Accepts variant names and fusion keys.
    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.fusion_key() == Some(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionDirection {
    CloudQueriesImage,
    ImageQueriesCloud,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Image,
    CloudGlobal,
    CloudProjected,
    Fused,
    Ccm,
    CcmFused,
}

impl FeatureRole {
    pub fn len(self) -> usize {
        match self {
            FeatureRole::Image => 2048,
            FeatureRole::CloudGlobal => 1024,
            FeatureRole::CloudProjected => 8,
            FeatureRole::Fused => 2056,
            FeatureRole::Ccm => 256,
            FeatureRole::CcmFused => 2304,
        }
    }
}

/// A single sample's feature vector tagged with its role; the length is checked
/// against the role's contract.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    role: FeatureRole,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(role: FeatureRole, values: Vec<f64>) -> Result<Self> {
        if values.len() != role.len() {
            return Err(Error::dim("feature vector", role.len(), values.len()));
        }
        Ok(Self { role, values })
    }

    pub fn role(&self) -> FeatureRole {
        self.role
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn expect_role(v: &FeatureVector, role: FeatureRole) -> Result<()> {
    if v.role != role {
        return Err(Error::Contract(format!("expected a {role:?} feature vector, got {:?}", v.role)));
    }
    Ok(())
}

/// `I^fv ⊕ P^fv`, image block first.
pub fn concat_fuse(image: &FeatureVector, cloud: &FeatureVector) -> Result<FeatureVector> {
    expect_role(image, FeatureRole::Image)?;
    expect_role(cloud, FeatureRole::CloudProjected)?;
    FeatureVector::new(FeatureRole::Fused, [image.values(), cloud.values()].concat())
}

/// `I^fv ⊕ CCM^fv`, image block first.
pub fn ccm_fuse(image: &FeatureVector, ccm: &FeatureVector) -> Result<FeatureVector> {
    expect_role(image, FeatureRole::Image)?;
    expect_role(ccm, FeatureRole::Ccm)?;
    FeatureVector::new(FeatureRole::CcmFused, [image.values(), ccm.values()].concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub classes: usize,
    pub point: PointEncoderConfig,
    pub image: ImageEncoderConfig,
    /// Second image encoder for the coordinate-mask raster.
    pub ccm: ImageEncoderConfig,
    /// Output width of the cloud projection MLP^P.
    pub projected_dim: usize,
    pub head_widths: Vec<usize>,
    pub dropout: f64,
    pub attention_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::SimnetConcat,
            classes: 2,
            point: PointEncoderConfig::default(),
            image: ImageEncoderConfig::default(),
            ccm: ImageEncoderConfig { feature_dim: 256, ..ImageEncoderConfig::default() },
            projected_dim: 8,
            head_widths: vec![512, 128],
            dropout: DROPOUT_RATE,
            attention_dim: 512,
        }
    }
}

impl ModelConfig {
    /// Width of the final layer: one sigmoid unit for two classes, else one logit per class.
    pub fn outputs(&self) -> usize {
        if self.classes == 2 {
            1
        } else {
            self.classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.projected_dim == 0 || self.attention_dim == 0 || self.head_widths.contains(&0) {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.point.validate()?;
        self.image.validate()?;
        self.ccm.validate()
    }

    /// Width of the vector entering the classifier head.
    pub fn fused_dim(&self) -> usize {
        let (img, pc) = (self.image.feature_dim, self.point.global_dim());
        match self.variant {
            ModelVariant::ImageOnly => img,
            ModelVariant::CloudOnly => pc,
            ModelVariant::SimnetConcat => img + self.projected_dim,
            ModelVariant::SimnetCaPc2img | ModelVariant::SimnetCaImg2pc => self.attention_dim,
            ModelVariant::SimnetBca => 2 * self.attention_dim,
            ModelVariant::CcmFusion => img + self.ccm.feature_dim,
        }
    }
}

/// Classifier head. The MLP form stacks `affine -> batchnorm -> relu -> dropout`
/// blocks before the output affine; the attention form applies
/// `batchnorm -> dropout` and a single output affine.
#[derive(Clone, Debug)]
struct Head {
    pre: Option<(Layer, Layer)>,
    blocks: Vec<[Layer; 3]>,
    out: Layer,
}

impl Head {
    fn mlp(prefix: &str, fan_in: usize, widths: &[usize], outputs: usize, dropout: f64) -> Result<Self> {
        let mut prev = fan_in;
        let mut blocks = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            blocks.push([
                Layer::new(format!("{prefix}.fc{i}"), LayerSpec::affine(prev, w))?,
                Layer::new(format!("{prefix}.bn{i}"), LayerSpec::batch_norm(w))?,
                Layer::new(format!("{prefix}.drop{i}"), LayerSpec::dropout(dropout))?,
            ]);
            prev = w;
        }
        let out = Layer::new(format!("{prefix}.out"), LayerSpec::affine(prev, outputs))?;
        Ok(Self { pre: None, blocks, out })
    }

    fn attention(prefix: &str, fan_in: usize, outputs: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            pre: Some((
                Layer::new(format!("{prefix}.bn"), LayerSpec::batch_norm(fan_in))?,
                Layer::new(format!("{prefix}.drop"), LayerSpec::dropout(dropout))?,
            )),
            blocks: Vec::new(),
            out: Layer::new(format!("{prefix}.out"), LayerSpec::affine(fan_in, outputs))?,
        })
    }

    fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        if let Some((bn, _)) = &self.pre {
            bn.init(store, rng)?;
        }
        for [fc, bn, _] in &self.blocks {
            fc.init(store, rng)?;
            bn.init(store, rng)?;
        }
        self.out.init(store, rng)
    }

    /// Returns logits.
    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some((bn, drop)) = &self.pre {
            h = bn.forward(s, &[h])?;
            h = drop.forward(s, &[h])?;
        }
        for [fc, bn, drop] in &self.blocks {
            h = fc.forward(s, &[h])?;
            h = bn.forward(s, &[h])?;
            h = s.tape.relu(h)?;
            h = drop.forward(s, &[h])?;
        }
        self.out.forward(s, &[h])
    }
}

/// One attention direction: query/key/value/output projections in the embedding space.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: Layer,
    pub key: Layer,
    pub value: Layer,
    pub output: Layer,
}

/// Single-token cross-attention between projected image and cloud features.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub dim: usize,
    pub direction: AttentionDirection,
    pub image_in: Layer,
    pub cloud_in: Layer,
    /// `[cloud→image]`, `[image→cloud]`, or both in that order.
    pub blocks: Vec<(AttentionDirection, AttentionBlock)>,
}

/// Tape handles of one attention evaluation.
pub struct AttentionTrace {
    pub image_token: Var,
    pub cloud_token: Var,
    /// Softmax weight per direction, `[B, 1]`.
    pub weights: Vec<Var>,
    /// Concatenated direction outputs, `[B, dim]` or `[B, 2·dim]`.
    pub output: Var,
}

impl CrossAttention {
    pub fn new(prefix: &str, image_dim: usize, cloud_dim: usize, dim: usize, direction: AttentionDirection) -> Result<Self> {
        let proj = |name: &str, fan_in: usize| Layer::new(format!("{prefix}.{name}"), LayerSpec::affine(fan_in, dim));
        let block = |tag: &str| -> Result<AttentionBlock> {
            Ok(AttentionBlock {
                query: proj(&format!("{tag}.query"), dim)?,
                key: proj(&format!("{tag}.key"), dim)?,
                value: proj(&format!("{tag}.value"), dim)?,
                output: proj(&format!("{tag}.output"), dim)?,
            })
        };
        let mut blocks = Vec::new();
        if direction != AttentionDirection::ImageQueriesCloud {
            blocks.push((AttentionDirection::CloudQueriesImage, block("pc2img")?));
        }
        if direction != AttentionDirection::CloudQueriesImage {
            blocks.push((AttentionDirection::ImageQueriesCloud, block("img2pc")?));
        }
        Ok(Self { dim, direction, image_in: proj("image_in", image_dim)?, cloud_in: proj("cloud_in", cloud_dim)?, blocks })
    }

    pub fn output_dim(&self) -> usize {
        self.dim * self.blocks.len()
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.image_in.init(store, rng)?;
        self.cloud_in.init(store, rng)?;
        for (_, b) in &self.blocks {
            for l in [&b.query, &b.key, &b.value, &b.output] {
                l.init(store, rng)?;
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, image: Var, cloud: Var) -> Result<AttentionTrace> {
        let image_token = self.image_in.forward(s, &[image])?;
        let cloud_token = self.cloud_in.forward(s, &[cloud])?;
        let scale = T::of(1.0 / (self.dim as f64).sqrt());
        let mut weights = Vec::new();
        let mut output: Option<Var> = None;
        for (dir, b) in &self.blocks {
            let (query_token, kv_token) = match dir {
                AttentionDirection::CloudQueriesImage => (cloud_token, image_token),
                _ => (image_token, cloud_token),
            };
            let q = b.query.forward(s, &[query_token])?;
            let k = b.key.forward(s, &[kv_token])?;
            let v = b.value.forward(s, &[kv_token])?;
            let score = s.tape.row_dot(q, k)?;
            let score = s.tape.scale(score, scale)?;
            let w = s.tape.softmax(score)?;
            let ctx = s.tape.mul_col(v, w)?;
            let o = b.output.forward(s, &[ctx])?;
            weights.push(w);
            output = Some(match output {
                None => o,
                Some(prev) => s.tape.concat(prev, o)?,
            });
        }
        let output = output.expect("at least one direction");
        Ok(AttentionTrace { image_token, cloud_token, weights, output })
    }
}

enum Fusion {
    Concat { mlp_p: Layer },
    Attention(CrossAttention),
    None,
}

/// Model inputs for one batch; which fields are required depends on the variant.
#[derive(Clone, Debug, Default)]
pub struct Batch<T> {
    /// `[B, 3, S, S]` in `[0, 1]`.
    pub images: Option<Tensor<T>>,
    /// `[B, 3, S', S']` coordinate-mask rasters in `[0, 1]`.
    pub ccm: Option<Tensor<T>>,
    pub clouds: Option<CloudBatch<T>>,
}

/// Tape handles of one model evaluation.
pub struct ModelOutput {
    pub logits: Var,
    /// Sigmoid `[B, 1]` for two classes, softmax `[B, C]` otherwise.
    pub probs: Var,
    /// The vector entering the classifier head.
    pub fused: Var,
    pub image_features: Option<Var>,
    pub cloud_global: Option<Var>,
    pub cloud_projected: Option<Var>,
    pub ccm_features: Option<Var>,
    pub attention: Option<AttentionTrace>,
    pub feature_transform: Option<(Var, usize)>,
}

pub struct Model {
    cfg: ModelConfig,
    image: Option<ImageEncoder>,
    ccm: Option<ImageEncoder>,
    point: Option<PointEncoder>,
    fusion: Fusion,
    head: Head,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let image = v.uses_image().then(|| ImageEncoder::new("image", &cfg.image)).transpose()?;
        let ccm = v.uses_ccm().then(|| ImageEncoder::new("ccm", &cfg.ccm)).transpose()?;
        let point = v.uses_cloud().then(|| PointEncoder::new("point", &cfg.point)).transpose()?;
        let fusion = if let Some(dir) = v.attention() {
            Fusion::Attention(CrossAttention::new(
                "attn",
                cfg.image.feature_dim,
                cfg.point.global_dim(),
                cfg.attention_dim,
                dir,
            )?)
        } else if v == ModelVariant::SimnetConcat {
            Fusion::Concat {
                mlp_p: Layer::new("mlp_p", LayerSpec::affine(cfg.point.global_dim(), cfg.projected_dim))?,
            }
        } else {
            Fusion::None
        };
        let head = match fusion {
            Fusion::Attention(_) => Head::attention("head", cfg.fused_dim(), cfg.outputs(), cfg.dropout)?,
            _ => Head::mlp("head", cfg.fused_dim(), &cfg.head_widths, cfg.outputs(), cfg.dropout)?,
        };
        Ok(Self { cfg: cfg.clone(), image, ccm, point, fusion, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn attention(&self) -> Option<&CrossAttention> {
        match &self.fusion {
            Fusion::Attention(a) => Some(a),
            _ => None,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        if let Some(e) = &self.image {
            e.init(store, rng)?;
        }
        if let Some(e) = &self.ccm {
            e.init(store, rng)?;
        }
        if let Some(e) = &self.point {
            e.init(store, rng)?;
        }
        match &self.fusion {
            Fusion::Concat { mlp_p } => mlp_p.init(store, rng)?,
            Fusion::Attention(a) => a.init(store, rng)?,
            Fusion::None => {}
        }
        self.head.init(store, rng)
    }

    /// Fresh parameter store initialized from `seed`.
    pub fn init_store<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, batch: &Batch<T>) -> Result<ModelOutput> {
        fn need<'b, U>(x: &'b Option<U>, what: &str) -> Result<&'b U> {
            x.as_ref().ok_or_else(|| Error::Contract(format!("model input is missing {what}")))
        }
        let image_features = match &self.image {
            Some(e) => {
                let x = s.input(need(&batch.images, "images")?);
                Some(e.forward(s, x)?)
            }
            None => None,
        };
        let ccm_features = match &self.ccm {
            Some(e) => {
                let x = s.input(need(&batch.ccm, "coordinate-mask rasters")?);
                Some(e.forward(s, x)?)
            }
            None => None,
        };
        let (cloud_global, feature_transform) = match &self.point {
            Some(e) => {
                let clouds = need(&batch.clouds, "point clouds")?;
                let x = s.input(&clouds.points);
                let f = e.forward(s, x, &clouds.segments)?;
                (Some(f.global), f.feature_transform)
            }
            None => (None, None),
        };
        let batch_size = [image_features, ccm_features, cloud_global]
            .into_iter()
            .flatten()
            .map(|v| s.tape.shape(v)[0])
            .collect::<Vec<_>>();
        if batch_size.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::dim("model batch", batch_size[0], batch_size[1..].to_vec()));
        }
        let mut cloud_projected = None;
        let mut attention = None;
        let fused = match (&self.fusion, self.cfg.variant) {
            (Fusion::Concat { mlp_p }, _) => {
                let g = cloud_global.expect("cloud branch");
                let p = mlp_p.forward(s, &[g])?;
                let p = s.tape.relu(p)?;
                cloud_projected = Some(p);
                s.tape.concat(image_features.expect("image branch"), p)?
            }
            (Fusion::Attention(a), _) => {
                let trace = a.forward(s, image_features.expect("image branch"), cloud_global.expect("cloud branch"))?;
                let out = trace.output;
                attention = Some(trace);
                out
            }
            (Fusion::None, ModelVariant::CcmFusion) => {
                s.tape.concat(image_features.expect("image branch"), ccm_features.expect("ccm branch"))?
            }
            (Fusion::None, ModelVariant::CloudOnly) => cloud_global.expect("cloud branch"),
            (Fusion::None, _) => image_features.expect("image branch"),
        };
        let logits = self.head.forward(s, fused)?;
        let probs = if self.cfg.outputs() == 1 { s.tape.sigmoid(logits)? } else { s.tape.softmax(logits)? };
        Ok(ModelOutput {
            logits,
            probs,
            fused,
            image_features,
            cloud_global,
            cloud_projected,
            ccm_features,
            attention,
            feature_transform,
        })
    }

    /// Mean classification loss plus the weighted feature-transform penalty.
    pub fn loss<T: Real>(&self, s: &mut Session<'_, T>, out: &ModelOutput, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.cfg.classes) {
            return Err(Error::Label(format!("label {bad} outside the {} classes of this head", self.cfg.classes)));
        }
        let base = if self.cfg.outputs() == 1 {
            s.tape.bce(out.probs, labels)?
        } else {
            s.tape.softmax_ce(out.logits, labels)?
        };
        match out.feature_transform {
            Some((a, k)) if self.cfg.point.reg_weight > 0.0 => {
                let pen = s.tape.orth_penalty(a, k)?;
                let pen = s.tape.scale(pen, T::of(self.cfg.point.reg_weight))?;
                s.tape.add(base, pen)
            }
            _ => Ok(base),
        }
    }
}

/// Predicted class per row of a probability output.
pub fn predictions<T: Real>(probs: &[T], outputs: usize) -> Vec<usize> {
    if outputs == 1 {
        probs.iter().map(|&p| usize::from(p.as_f64() >= 0.5)).collect()
    } else {
        probs
            .chunks(outputs)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect()
    }
}
