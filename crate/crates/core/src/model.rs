//! The lane-change decision network: a surrounding-vehicle CNN, an ego CNN
//! and a fully connected head over both plus the traffic factors.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{
    FeatureBundle, Normalizer, BUNDLE_LEN, DEFAULT_SAFE_HEADWAY_S, DOP_COLS, DOP_LEN, DOP_ROWS,
    FACTOR_COUNT, SURROUND_CHANNELS,
};
use crate::labeling::{Label, LabeledCase};
use crate::nn::gradcheck::Differentiable;
use crate::nn::loss::{cross_entropy_label, softmax, softmax_ce_grad};
use crate::nn::{Adam, Conv2d, Dense, Layer, NnError, Sequential, Tensor};
use crate::trajectory::Role;

pub const WEIGHT_MAGIC: &[u8; 8] = b"DSADLC-W";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

const SURROUND_END: usize = SURROUND_CHANNELS * DOP_LEN;
const EGO_END: usize = SURROUND_END + DOP_LEN;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("training diverged: loss is not finite in epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-ego")]
    NoEgoDs,
    #[serde(rename = "no-surround")]
    NoSurroundDs,
    #[serde(rename = "no-ds")]
    NoDs,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoEgoDs,
        Ablation::NoSurroundDs,
        Ablation::NoDs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoEgoDs => "no-ego",
            Ablation::NoSurroundDs => "no-surround",
            Ablation::NoDs => "no-ds",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Row label in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            Ablation::Full => "DSA-DLC",
            Ablation::NoEgoDs => "w/o ego DS",
            Ablation::NoSurroundDs => "w/o surrounding DS",
            Ablation::NoDs => "w/o DS",
        }
    }

    pub fn uses_surround(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoEgoDs)
    }

    pub fn uses_ego(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoSurroundDs)
    }

    fn code(self) -> u8 {
        match self {
            Ablation::Full => 0,
            Ablation::NoEgoDs => 1,
            Ablation::NoSurroundDs => 2,
            Ablation::NoDs => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Ablation::ALL.into_iter().find(|a| a.code() == c)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer widths of the two convolutional branches and the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub surround_channels: [usize; 2],
    pub ego_channels: [usize; 2],
    pub kernels: [usize; 2],
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn standard() -> Self {
        Architecture {
            surround_channels: [16, 32],
            ego_channels: [16, 8],
            kernels: [4, 5],
            hidden: vec![50, 128, 32, 16],
        }
    }

    /// Quarter-width variant for gradient verification.
    pub fn reduced() -> Self {
        Architecture {
            surround_channels: [4, 8],
            ego_channels: [4, 2],
            kernels: [4, 5],
            hidden: vec![12, 32, 8, 4],
        }
    }

    pub fn head_input_width(&self, ablation: Ablation) -> usize {
        let cells = DOP_ROWS * DOP_COLS;
        let mut w = FACTOR_COUNT;
        if ablation.uses_surround() {
            w += self.surround_channels[1] * cells;
        }
        if ablation.uses_ego() {
            w += self.ego_channels[1] * cells;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub ablation: Ablation,
    pub t_h: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub safety_mask_default: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ablation: Ablation::Full,
            t_h: DEFAULT_SAFE_HEADWAY_S,
            epochs: 50,
            batch_size: 16,
            lr: 0.001,
            seed: 0,
            safety_mask_default: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ModelError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.t_h > 0.0) {
            return Err(ModelError::Config(format!("t_h must be positive, got {}", self.t_h)));
        }
        Ok(())
    }
}

fn conv_branch(in_channels: usize, channels: [usize; 2], kernels: [usize; 2]) -> Sequential {
    Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(in_channels, channels[0], kernels[0])),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(channels[0], channels[1], kernels[1])),
        Layer::Relu,
        Layer::Flatten,
    ])
}

/// Network weights without input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DlcNet {
    pub ablation: Ablation,
    pub arch: Architecture,
    pub surround: Option<Sequential>,
    pub ego: Option<Sequential>,
    pub head: Sequential,
}

struct Trace {
    surround: Option<Vec<Tensor>>,
    ego: Option<Vec<Tensor>>,
    head: Vec<Tensor>,
}

impl DlcNet {
    pub fn new(arch: Architecture, ablation: Ablation, seed: u64) -> Self {
        let surround = ablation
            .uses_surround()
            .then(|| conv_branch(SURROUND_CHANNELS, arch.surround_channels, arch.kernels));
        let ego = ablation
            .uses_ego()
            .then(|| conv_branch(1, arch.ego_channels, arch.kernels));
        let mut layers = Vec::new();
        let mut width = arch.head_input_width(ablation);
        for &h in &arch.hidden {
            layers.push(Layer::Dense(Dense::new(width, h)));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense(Dense::new(width, Label::ALL.len())));
        let mut net = DlcNet {
            ablation,
            arch,
            surround,
            ego,
            head: Sequential::new(layers),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in net.parts_mut() {
            s.init_he_uniform(&mut rng);
        }
        net
    }

    fn parts(&self) -> Vec<&Sequential> {
        self.surround.iter().chain(self.ego.iter()).chain([&self.head]).collect()
    }

    fn parts_mut(&mut self) -> Vec<&mut Sequential> {
        self.surround
            .iter_mut()
            .chain(self.ego.iter_mut())
            .chain([&mut self.head])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.parts().into_iter().flat_map(|s| s.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.parts_mut().into_iter().flat_map(|s| s.params_mut()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(s) = &self.surround {
            names.extend(s.param_group_names("surround."));
        }
        if let Some(s) = &self.ego {
            names.extend(s.param_group_names("ego."));
        }
        names.extend(self.head.param_group_names("head."));
        names
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn check_input(x: &[f64]) -> Result<(), NnError> {
        if x.len() != BUNDLE_LEN {
            return Err(NnError::Shape(format!(
                "expected {BUNDLE_LEN} features, got {}",
                x.len()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Result<Trace, NnError> {
        Self::check_input(x)?;
        let mut head_in = Vec::with_capacity(self.arch.head_input_width(self.ablation));
        let surround = match &self.surround {
            Some(net) => {
                let t = Tensor::new(vec![SURROUND_CHANNELS, DOP_ROWS, DOP_COLS], x[..SURROUND_END].to_vec())?;
                let acts = net.forward_trace(t)?;
                head_in.extend_from_slice(acts.last().expect("output").data());
                Some(acts)
            }
            None => None,
        };
        let ego = match &self.ego {
            Some(net) => {
                let t = Tensor::new(vec![1, DOP_ROWS, DOP_COLS], x[SURROUND_END..EGO_END].to_vec())?;
                let acts = net.forward_trace(t)?;
                head_in.extend_from_slice(acts.last().expect("output").data());
                Some(acts)
            }
            None => None,
        };
        head_in.extend_from_slice(&x[EGO_END..]);
        let head = self.head.forward_trace(Tensor::from_vec(head_in))?;
        Ok(Trace { surround, ego, head })
    }

    /// Class probabilities for one normalized feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; 3], NnError> {
        let t = self.trace(x)?;
        let p = softmax(t.head.last().expect("output").data());
        Ok([p[0], p[1], p[2]])
    }

    /// Loss of one example, accumulating its gradients into `grads`.
    pub fn accumulate(&self, x: &[f64], label: usize, grads: &mut [Vec<f64>]) -> Result<f64, NnError> {
        let t = self.trace(x)?;
        let probs = softmax(t.head.last().expect("output").data());
        let loss = cross_entropy_label(&probs, label);
        let n_surround = self.surround.as_ref().map_or(0, |s| s.params().len());
        let n_ego = self.ego.as_ref().map_or(0, |s| s.params().len());
        let (g_surround, rest) = grads.split_at_mut(n_surround);
        let (g_ego, g_head) = rest.split_at_mut(n_ego);
        let d_in = self
            .head
            .backward(&t.head, Tensor::from_vec(softmax_ce_grad(&probs, label)), g_head)?;
        let d_in = d_in.data();
        let mut offset = 0;
        if let (Some(net), Some(acts)) = (&self.surround, &t.surround) {
            let out = acts.last().expect("output");
            let g = Tensor::new(out.shape().to_vec(), d_in[offset..offset + out.len()].to_vec())?;
            offset += out.len();
            net.backward(acts, g, g_surround)?;
        }
        if let (Some(net), Some(acts)) = (&self.ego, &t.ego) {
            let out = acts.last().expect("output");
            let g = Tensor::new(out.shape().to_vec(), d_in[offset..offset + out.len()].to_vec())?;
            net.backward(acts, g, g_ego)?;
        }
        Ok(loss)
    }

    fn relu_pattern(parts: &[(&Sequential, &Vec<Tensor>)]) -> Vec<bool> {
        let mut out = Vec::new();
        for (net, acts) in parts {
            for (i, layer) in net.layers.iter().enumerate() {
                if matches!(layer, Layer::Relu) {
                    out.extend(acts[i].data().iter().map(|&v| v > 0.0));
                }
            }
        }
        out
    }
}

impl Differentiable for DlcNet {
    type Input = Vec<f64>;

    fn param_names(&self) -> Vec<String> {
        DlcNet::param_names(self)
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        DlcNet::params_mut(self)
    }

    fn gradients(&self, input: &Vec<f64>, label: usize) -> Result<Vec<Vec<f64>>, NnError> {
        let mut g = self.zero_grads();
        self.accumulate(input, label, &mut g)?;
        Ok(g)
    }

    fn loss_and_pattern(&self, input: &Vec<f64>, label: usize) -> Result<(f64, Vec<bool>), NnError> {
        let t = self.trace(input)?;
        let probs = softmax(t.head.last().expect("output").data());
        let mut parts = Vec::new();
        if let (Some(n), Some(a)) = (&self.surround, &t.surround) {
            parts.push((n, a));
        }
        if let (Some(n), Some(a)) = (&self.ego, &t.ego) {
            parts.push((n, a));
        }
        parts.push((&self.head, &t.head));
        let pattern = Self::relu_pattern(&parts);
        Ok((cross_entropy_label(&probs, label), pattern))
    }
}

/// Classifier output after the optional alongside-vehicle rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    /// Keep, Left, Right.
    pub probabilities: [f64; 3],
    pub class: Label,
    /// Whether the rule removed a change class.
    pub masked: bool,
}

/// Lowest index wins ties.
pub fn argmax(p: &[f64; 3]) -> Label {
    let mut best = 0;
    for i in 1..3 {
        if p[i] > p[best] {
            best = i;
        }
    }
    Label::from_index(best).expect("three classes")
}

/// Forbid changing toward a side with an alongside vehicle and renormalize.
pub fn apply_safety_mask(p: [f64; 3], bundle: &FeatureBundle) -> ([f64; 3], bool) {
    let mut out = p;
    let mut masked = false;
    if !bundle.channel(Role::ASL).is_zero() {
        out[Label::Left.index()] = 0.0;
        masked = true;
    }
    if !bundle.channel(Role::ASR).is_zero() {
        out[Label::Right.index()] = 0.0;
        masked = true;
    }
    if !masked {
        return (p, false);
    }
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        for v in &mut out {
            *v /= sum;
        }
    } else {
        out = [1.0, 0.0, 0.0];
    }
    (out, true)
}

/// A trained network with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: DlcNet,
    pub normalizer: Normalizer,
    pub t_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

pub fn build(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    Ok(Model::new(Architecture::standard(), config))
}

impl Model {
    pub fn new(arch: Architecture, config: &ModelConfig) -> Self {
        Model {
            net: DlcNet::new(arch, config.ablation, config.seed),
            normalizer: Normalizer::identity(BUNDLE_LEN),
            t_h: config.t_h,
        }
    }

    pub fn ablation(&self) -> Ablation {
        self.net.ablation
    }

    pub fn probabilities(&self, bundle: &FeatureBundle) -> [f64; 3] {
        let x = self.normalizer.apply(&bundle.to_flat());
        self.net.forward(&x).expect("bundle width is fixed")
    }

    pub fn predict(&self, bundle: &FeatureBundle, apply_mask: bool) -> Decision {
        let raw = self.probabilities(bundle);
        let (probabilities, masked) = if apply_mask {
            apply_safety_mask(raw, bundle)
        } else {
            (raw, false)
        };
        Decision {
            probabilities,
            class: argmax(&probabilities),
            masked,
        }
    }

    /// Predict from a flat feature row.
    pub fn predict_flat(&self, row: &[f64], apply_mask: bool) -> Result<Decision, ModelError> {
        let bundle = FeatureBundle::from_flat(row).ok_or_else(|| {
            NnError::Shape(format!("expected {BUNDLE_LEN} features, got {}", row.len()))
        })?;
        Ok(self.predict(&bundle, apply_mask))
    }

    /// Fit input normalization on the training split.
    pub fn fit_normalizer(&mut self, train_set: &[LabeledCase]) -> Result<(), ModelError> {
        let raw: Vec<Vec<f64>> = train_set.iter().map(|c| c.bundle.to_flat()).collect();
        self.normalizer = Normalizer::fit(raw.iter().map(|r| r.as_slice()))
            .ok_or_else(|| ModelError::Config("training set is empty".into()))?;
        Ok(())
    }

    /// Minibatch Adam under the current normalizer.
    pub fn train(
        &mut self,
        train_set: &[LabeledCase],
        config: &ModelConfig,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<TrainReport, ModelError> {
        config.validate()?;
        if train_set.is_empty() {
            return Err(ModelError::Config("training set is empty".into()));
        }
        let rows: Vec<Vec<f64>> = train_set
            .iter()
            .map(|c| self.normalizer.apply(&c.bundle.to_flat()))
            .collect();
        let labels: Vec<usize> = train_set.iter().map(|c| c.label.index()).collect();
        let sizes: Vec<usize> = self.net.params().iter().map(|p| p.len()).collect();
        let mut adam = Adam::new(config.lr, &sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut history = Vec::with_capacity(config.epochs);
        let mut grads = self.net.zero_grads();
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size) {
                for g in grads.iter_mut() {
                    g.fill(0.0);
                }
                for &i in batch {
                    total += self.net.accumulate(&rows[i], labels[i], &mut grads)?;
                }
                let scale = 1.0 / batch.len() as f64;
                for g in grads.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
                adam.step(&mut self.net.params_mut(), &grads)?;
            }
            let mean = total / rows.len() as f64;
            let params_finite = self.net.params().iter().all(|p| p.iter().all(|v| v.is_finite()));
            if !mean.is_finite() || !params_finite {
                return Err(ModelError::TrainingDiverged { epoch });
            }
            history.push(mean);
            on_epoch(epoch, mean);
        }
        Ok(TrainReport {
            loss_history: history,
        })
    }

    /// Serialize to the weight-file layout:
    ///
    /// ```text
    /// magic "DSADLC-W" | version u32 | ablation u8 | t_h f64
    /// architecture: surround channels 2×u32 | ego channels 2×u32 | kernels 2×u32 |
    ///               hidden count u32 | widths u32...
    /// layer table: group count u32 | per group: name length u16, name, element count u32
    /// normalizer: dim u32 | means f64... | stds f64...
    /// payload: every parameter group as f64
    /// SHA-256 of all preceding bytes
    /// ```
    ///
    /// Integers and floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(WEIGHT_MAGIC);
        b.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
        b.push(self.net.ablation.code());
        b.extend_from_slice(&self.t_h.to_le_bytes());
        let a = &self.net.arch;
        for v in a.surround_channels.iter().chain(&a.ego_channels).chain(&a.kernels) {
            b.extend_from_slice(&(*v as u32).to_le_bytes());
        }
        b.extend_from_slice(&(a.hidden.len() as u32).to_le_bytes());
        for v in &a.hidden {
            b.extend_from_slice(&(*v as u32).to_le_bytes());
        }
        let names = self.net.param_names();
        let params = self.net.params();
        b.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for (name, p) in names.iter().zip(&params) {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(p.len() as u32).to_le_bytes());
        }
        b.extend_from_slice(&(self.normalizer.dim() as u32).to_le_bytes());
        for v in self.normalizer.mean.iter().chain(&self.normalizer.std) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for p in &params {
            for v in p.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Format(m.to_string());
        if bytes.len() < WEIGHT_MAGIC.len() + 32 {
            return Err(bad("truncated file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &body[..8] != WEIGHT_MAGIC {
            return Err(bad("bad magic"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { b: body, pos: 8 };
        let version = r.u32()?;
        if version != WEIGHT_FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let ablation = Ablation::from_code(r.u8()?).ok_or_else(|| bad("unknown ablation"))?;
        let t_h = r.f64()?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let n_hidden = r.u32()? as usize;
        if n_hidden > 64 {
            return Err(bad("implausible head depth"));
        }
        let hidden = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims.iter().chain(&hidden).any(|&d| d == 0 || d > 1 << 16) {
            return Err(bad("implausible layer width"));
        }
        let arch = Architecture {
            surround_channels: [dims[0], dims[1]],
            ego_channels: [dims[2], dims[3]],
            kernels: [dims[4], dims[5]],
            hidden,
        };
        let mut net = DlcNet::new(arch, ablation, 0);
        let names = net.param_names();
        let groups = r.u32()? as usize;
        if groups != names.len() {
            return Err(bad("layer table does not match architecture"));
        }
        let expected: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        for (name, &len) in names.iter().zip(&expected) {
            let n = r.u16()? as usize;
            if r.take(n)? != name.as_bytes() || r.u32()? as usize != len {
                return Err(ModelError::Format(format!("layer table mismatch at {name}")));
            }
        }
        let dim = r.u32()? as usize;
        if dim != BUNDLE_LEN {
            return Err(bad("normalizer width mismatch"));
        }
        let mean = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let std = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        for p in net.params_mut() {
            for v in p.iter_mut() {
                *v = r.f64()?;
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Model {
            net,
            normalizer: Normalizer { mean, std },
            t_h,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized weights.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let s = self
            .b
            .get(self.pos..self.pos + n)
            .ok_or_else(|| ModelError::Format("truncated file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Dop;
    use crate::labeling::Provenance;
    use crate::nn::gradcheck::gradient_check;
    use rand::Rng;
    use std::sync::Arc;

    fn random_bundle(rng: &mut ChaCha8Rng, alongside: bool) -> FeatureBundle {
        let flat: Vec<f64> = (0..BUNDLE_LEN).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut b = FeatureBundle::from_flat(&flat).unwrap();
        if !alongside {
            b.surround[Role::ASL.index()] = Dop::ZERO;
            b.surround[Role::ASR.index()] = Dop::ZERO;
        }
        b
    }

    fn case(bundle: FeatureBundle, label: Label) -> LabeledCase {
        LabeledCase {
            bundle: Arc::new(bundle),
            label,
            provenance: Provenance {
                recording_id: 1,
                vehicle_id: 1,
                decision_frame: 100,
                event: None,
            },
        }
    }

    #[test]
    fn standard_parameter_count() {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let dense = |i: usize, o: usize| i * o + o;
        let want = conv(7, 16, 4)
            + conv(16, 32, 5)
            + conv(1, 16, 4)
            + conv(16, 8, 5)
            + dense(1792 + 448 + 10, 50)
            + dense(50, 128)
            + dense(128, 32)
            + dense(32, 16)
            + dense(16, 3);
        let m = build(&ModelConfig::default()).unwrap();
        assert_eq!(m.net.param_count(), want);
        assert_eq!(want, 141_905);
    }

    #[test]
    fn head_widths_per_ablation() {
        let a = Architecture::standard();
        assert_eq!(a.head_input_width(Ablation::Full), 2250);
        assert_eq!(a.head_input_width(Ablation::NoEgoDs), 1802);
        assert_eq!(a.head_input_width(Ablation::NoSurroundDs), 458);
        assert_eq!(a.head_input_width(Ablation::NoDs), 10);
        let m = build(&ModelConfig {
            ablation: Ablation::NoDs,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(m.net.surround.is_none() && m.net.ego.is_none());
    }

    #[test]
    fn zero_bundle_gives_distribution() {
        let m = build(&ModelConfig::default()).unwrap();
        let p = m.probabilities(&FeatureBundle::zeros());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn ablated_branch_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ablation in Ablation::ALL {
            let m = build(&ModelConfig {
                ablation,
                ..ModelConfig::default()
            })
            .unwrap();
            let b = random_bundle(&mut rng, true);
            let p = m.probabilities(&b);
            let mut ego = b.clone();
            ego.ego = Dop::from_flat(&[7.0; DOP_LEN]);
            let mut sur = b.clone();
            sur.surround[2] = Dop::from_flat(&[-3.0; DOP_LEN]);
            assert_eq!(m.probabilities(&ego) == p, !ablation.uses_ego(), "{ablation}");
            assert_eq!(m.probabilities(&sur) == p, !ablation.uses_surround(), "{ablation}");
        }
    }

    #[test]
    fn mask_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = build(&ModelConfig::default()).unwrap();
        let both = random_bundle(&mut rng, true);
        let d = m.predict(&both, true);
        assert_eq!(d.class, Label::Keep);
        assert!(d.masked);
        assert_eq!(d.probabilities, [1.0, 0.0, 0.0]);

        let off = m.predict(&both, false);
        assert!(!off.masked);
        assert_eq!(off.probabilities, m.probabilities(&both));

        let none = random_bundle(&mut rng, false);
        assert_eq!(m.predict(&none, true), m.predict(&none, false));
    }

    #[test]
    fn mask_never_raises_change_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut b = random_bundle(&mut rng, false);
            if rng.gen_bool(0.5) {
                b.surround[Role::ASL.index()] = Dop::from_flat(&[1.0; DOP_LEN]);
            } else {
                b.surround[Role::ASR.index()] = Dop::from_flat(&[1.0; DOP_LEN]);
            }
            let raw = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let s: f64 = raw.iter().sum();
            let raw = raw.map(|v| v / s);
            let (p, masked) = apply_safety_mask(raw, &b);
            assert!(masked);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let zeroed = if b.channel(Role::ASL).is_zero() { 2 } else { 1 };
            assert_eq!(p[zeroed], 0.0);
            let other = 3 - zeroed;
            assert!(p[other] >= raw[other] - 1e-15 || p[0] >= raw[0]);
        }
    }

    #[test]
    fn ties_go_to_lowest_class() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), Label::Keep);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), Label::Left);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), Label::Keep);
    }

    #[test]
    fn reduced_model_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for ablation in Ablation::ALL {
            let mut net = DlcNet::new(Architecture::reduced(), ablation, 9);
            let x: Vec<f64> = (0..BUNDLE_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = gradient_check(&mut net, &x, rng.gen_range(0..3), 1e-4).unwrap();
            for g in &report.groups {
                assert!(g.max_rel_error < 1e-3, "{ablation}: {g:?}");
            }
        }
    }

    #[test]
    fn fits_small_separable_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set: Vec<_> = (0..24)
            .map(|i| case(random_bundle(&mut rng, false), Label::from_index(i % 3).unwrap()))
            .collect();
        let cfg = ModelConfig {
            epochs: 60,
            lr: 0.003,
            batch_size: 8,
            ..ModelConfig::default()
        };
        let mut m = Model::new(Architecture::reduced(), &cfg);
        m.fit_normalizer(&set).unwrap();
        let report = m.train(&set, &cfg, |_, _| {}).unwrap();
        assert_eq!(report.loss_history.len(), 60);
        assert!(report.loss_history[0] > 0.8);
        assert!(*report.loss_history.last().unwrap() < 0.05, "{:?}", report.loss_history);
        for c in &set {
            assert_eq!(m.predict(&c.bundle, false).class, c.label);
        }
    }

    #[test]
    fn memorizes_repeated_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = random_bundle(&mut rng, false);
        let set = vec![case(b, Label::Right); 16];
        let cfg = ModelConfig::default();
        let mut m = build(&cfg).unwrap();
        let report = m.train(&set, &cfg, |_, _| {}).unwrap();
        assert!(*report.loss_history.last().unwrap() < 1e-3, "{:?}", report.loss_history);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set: Vec<_> = (0..40)
            .map(|i| case(random_bundle(&mut rng, false), Label::from_index(i % 3).unwrap()))
            .collect();
        let cfg = ModelConfig {
            epochs: 3,
            seed: 11,
            ..ModelConfig::default()
        };
        let run = || {
            let mut m = Model::new(Architecture::reduced(), &cfg);
            m.fit_normalizer(&set).unwrap();
            let r = m.train(&set, &cfg, |_, _| {}).unwrap();
            (m.checksum(), r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn diverging_input_is_reported() {
        let mut b = FeatureBundle::zeros();
        b.factors.0[0] = f64::NAN;
        let set = vec![case(b, Label::Keep), case(FeatureBundle::zeros(), Label::Left)];
        let cfg = ModelConfig {
            epochs: 2,
            ..ModelConfig::default()
        };
        let mut m = Model::new(Architecture::reduced(), &cfg);
        let r = m.train(&set, &cfg, |_, _| {});
        assert!(matches!(r, Err(ModelError::TrainingDiverged { epoch: 1 })), "{r:?}");
    }

    #[test]
    fn weight_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dir = tempfile::tempdir().unwrap();
        for ablation in Ablation::ALL {
            let mut m = build(&ModelConfig {
                ablation,
                seed: 4,
                ..ModelConfig::default()
            })
            .unwrap();
            m.normalizer.mean[5] = 0.25;
            m.normalizer.std[7] = 3.5;
            let path = dir.path().join(format!("{ablation}.w"));
            m.save(&path).unwrap();
            let back = Model::load(&path).unwrap();
            assert_eq!(back, m);
            let again = dir.path().join("again.w");
            back.save(&again).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
            for _ in 0..100 {
                let alongside = rng.gen_bool(0.3);
                let b = random_bundle(&mut rng, alongside);
                assert_eq!(back.predict(&b, true), m.predict(&b, true));
            }
        }
    }

    #[test]
    fn damaged_weight_file_rejected() {
        let m = Model::new(Architecture::reduced(), &ModelConfig::default());
        let bytes = m.to_bytes();
        assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 10]), Err(ModelError::Format(_))));
        assert!(matches!(Model::from_bytes(&bytes[..20]), Err(ModelError::Format(_))));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Model::from_bytes(&flipped), Err(ModelError::Format(_))));
        let mut version = bytes.clone();
        version[8] = 9;
        let body_len = version.len() - 32;
        let digest = Sha256::digest(&version[..body_len]);
        version[body_len..].copy_from_slice(&digest);
        assert!(matches!(Model::from_bytes(&version), Err(ModelError::Format(m)) if m.contains("version")));
    }
}
