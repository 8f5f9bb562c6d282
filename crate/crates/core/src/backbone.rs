//! 3D residual feature extractor, projection heads, freezing and checkpoints.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm3d, BnCache, Conv3d, Linear, Mode,
    Param, Tensor,
};

pub mod checkpoint;

pub use checkpoint::{load_weights, read_weights, save_weights};

/// Residual blocks in the extractor; all but the first downsample by two.
pub const NUM_BLOCKS: usize = 6;

/// Architecture-relevant part of the configuration. Two models can exchange
/// weights exactly when their specs are equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub input_shape: [usize; 3],
    pub in_channels: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
}

impl ExtractorSpec {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        ExtractorSpec {
            input_shape: c.input_shape,
            in_channels: 1,
            base_channels: c.base_channels,
            latent_dim: c.latent_dim,
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }

    /// Channels produced by block `i`.
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Latent to self-supervision embedding.
    Ssl,
    /// Latent to class logits.
    Cls,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Ssl => "ssl",
            HeadKind::Cls => "cls",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl HeadSpec {
    pub fn from_config(c: &ExperimentConfig, kind: HeadKind) -> Self {
        HeadSpec {
            kind,
            in_dim: c.latent_dim,
            hidden_dim: c.head_hidden_dim,
            out_dim: match kind {
                HeadKind::Ssl => c.projection_dim,
                HeadKind::Cls => c.num_classes,
            },
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

fn fingerprint_of<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_string(v).expect("spec serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..16])
}

/// Spatial extent after each block. Every stride-2 convolution needs at least
/// two voxels along each axis, otherwise the map has collapsed.
pub fn spatial_schedule(input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let mut cur = input;
    if cur.contains(&0) {
        return Err(Error::Config(format!("input_shape {input:?} has an empty axis")));
    }
    let mut out = vec![cur];
    for block in 1..NUM_BLOCKS {
        if cur.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!(
                "input_shape {input:?} collapses to {cur:?} before block {} (stride-2 stage needs >= 2 voxels per axis)",
                block + 1
            )));
        }
        cur = cur.map(|n| n.div_ceil(2));
        out.push(cur);
    }
    Ok(out)
}

/// Two 3x3x3 convolutions with batch norm and ReLU plus a shortcut. The first
/// convolution carries the stride; a 1x1x1 projection shortcut is used
/// whenever stride or width changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub bn1: BatchNorm3d,
    pub conv2: Conv3d,
    pub bn2: BatchNorm3d,
    pub shortcut: Option<(Conv3d, BatchNorm3d)>,
}

#[derive(Debug)]
struct BlockTape {
    input: Tensor,
    bn1: BnCache,
    act1: Tensor,
    bn2: BnCache,
    shortcut: Option<BnCache>,
    output: Tensor,
}

impl ResidualBlock {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv3d::new(cin, cout, 3, stride, rng);
        let conv2 = Conv3d::new(cout, cout, 3, 1, rng);
        let shortcut = (stride != 1 || cin != cout)
            .then(|| (Conv3d::new(cin, cout, 1, stride, rng), BatchNorm3d::new(cout)));
        ResidualBlock {
            conv1,
            bn1: BatchNorm3d::new(cout),
            conv2,
            bn2: BatchNorm3d::zero_scaled(cout),
            shortcut,
        }
    }

    fn forward(&mut self, x: Tensor, mode: Mode) -> Result<(Tensor, BlockTape)> {
        let h = self.conv1.forward(&x)?;
        let (h, bn1) = self.bn1.forward(&h, mode)?;
        let act1 = relu(&h);
        let h = self.conv2.forward(&act1)?;
        let (mut h, bn2) = self.bn2.forward(&h, mode)?;
        let shortcut = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(&x)?;
                let (s, cache) = bn.forward(&s, mode)?;
                h.add_assign(&s);
                Some(cache)
            }
            None => {
                h.add_assign(&x);
                None
            }
        };
        let output = relu(&h);
        Ok((
            output.clone(),
            BlockTape {
                input: x,
                bn1,
                act1,
                bn2,
                shortcut,
                output,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.infer(&self.conv1.forward(x)?)?;
        let h = relu(&h);
        let mut h = self.bn2.infer(&self.conv2.forward(&h)?)?;
        match &self.shortcut {
            Some((conv, bn)) => h.add_assign(&bn.infer(&conv.forward(x)?)?),
            None => h.add_assign(x),
        }
        Ok(relu(&h))
    }

    fn backward(&mut self, tape: BlockTape, dout: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let d = relu_backward(&tape.output, dout);
        let dh2 = self.bn2.backward(&tape.bn2, &d)?;
        let da1 = self.conv2.backward(&tape.act1, &dh2, true)?.expect("requested");
        let db1 = relu_backward(&tape.act1, &da1);
        let dh1 = self.bn1.backward(&tape.bn1, &db1)?;
        let dx = self.conv1.backward(&tape.input, &dh1, need_input_grad)?;
        let ds = match (&mut self.shortcut, &tape.shortcut) {
            (Some((conv, bn)), Some(cache)) => {
                let dsh = bn.backward(cache, &d)?;
                conv.backward(&tape.input, &dsh, need_input_grad)?
            }
            _ => need_input_grad.then(|| d.clone()),
        };
        Ok(match (dx, ds) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        visit_conv(&self.conv1, &format!("{prefix}.conv1"), f);
        visit_bn(&self.bn1, &format!("{prefix}.bn1"), f);
        visit_conv(&self.conv2, &format!("{prefix}.conv2"), f);
        visit_bn(&self.bn2, &format!("{prefix}.bn2"), f);
        if let Some((c, b)) = &self.shortcut {
            visit_conv(c, &format!("{prefix}.shortcut.conv"), f);
            visit_bn(b, &format!("{prefix}.shortcut.bn"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        f(format!("{prefix}.conv1.weight"), TensorMut::Param(&mut self.conv1.weight));
        visit_bn_mut(&mut self.bn1, &format!("{prefix}.bn1"), f);
        f(format!("{prefix}.conv2.weight"), TensorMut::Param(&mut self.conv2.weight));
        visit_bn_mut(&mut self.bn2, &format!("{prefix}.bn2"), f);
        if let Some((c, b)) = &mut self.shortcut {
            f(format!("{prefix}.shortcut.conv.weight"), TensorMut::Param(&mut c.weight));
            visit_bn_mut(b, &format!("{prefix}.shortcut.bn"), f);
        }
    }
}

/// Read-only view of a named array: trainable parameter or running buffer.
#[derive(Debug, Clone, Copy)]
pub enum TensorRef<'a> {
    Param(&'a Param),
    Buffer(&'a [f32]),
}

impl TensorRef<'_> {
    pub fn values(&self) -> &[f32] {
        match self {
            TensorRef::Param(p) => &p.value,
            TensorRef::Buffer(b) => b,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Param(p) => p.shape.clone(),
            TensorRef::Buffer(b) => vec![b.len()],
        }
    }
}

#[derive(Debug)]
pub enum TensorMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Vec<f32>),
}

impl TensorMut<'_> {
    pub fn values_mut(&mut self) -> &mut [f32] {
        match self {
            TensorMut::Param(p) => &mut p.value,
            TensorMut::Buffer(b) => b,
        }
    }
}

fn visit_conv<'a>(c: &'a Conv3d, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
    f(format!("{prefix}.weight"), TensorRef::Param(&c.weight));
}

fn visit_bn<'a>(b: &'a BatchNorm3d, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
    f(format!("{prefix}.gamma"), TensorRef::Param(&b.gamma));
    f(format!("{prefix}.beta"), TensorRef::Param(&b.beta));
    f(format!("{prefix}.running_mean"), TensorRef::Buffer(&b.running_mean));
    f(format!("{prefix}.running_var"), TensorRef::Buffer(&b.running_var));
}

fn visit_bn_mut<'a>(b: &'a mut BatchNorm3d, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
    f(format!("{prefix}.gamma"), TensorMut::Param(&mut b.gamma));
    f(format!("{prefix}.beta"), TensorMut::Param(&mut b.beta));
    f(format!("{prefix}.running_mean"), TensorMut::Buffer(&mut b.running_mean));
    f(format!("{prefix}.running_var"), TensorMut::Buffer(&mut b.running_var));
}

fn visit_linear<'a>(l: &'a Linear, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
    f(format!("{prefix}.weight"), TensorRef::Param(&l.weight));
    f(format!("{prefix}.bias"), TensorRef::Param(&l.bias));
}

fn visit_linear_mut<'a>(l: &'a mut Linear, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
    f(format!("{prefix}.weight"), TensorMut::Param(&mut l.weight));
    f(format!("{prefix}.bias"), TensorMut::Param(&mut l.bias));
}

/// Anything holding named arrays that can be checkpointed and trained.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorRef<'a>));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, TensorMut<'a>));

    /// Trainable parameters in a stable order.
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| {
            if let TensorMut::Param(p) = t {
                out.push(p);
            }
        });
        out
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, t| {
            if let TensorMut::Param(p) = t {
                p.zero_grad();
            }
        });
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| {
            if let TensorRef::Param(p) = t {
                n += p.len();
            }
        });
        n
    }

    /// SHA-256 over every named array, parameters and buffers alike.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, t| {
            h.update(name.as_bytes());
            for v in t.values() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// Sum of squared accumulated gradients.
    fn grad_norm_sq(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| {
            if let TensorRef::Param(p) = t {
                s += p.grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>();
            }
        });
        s
    }

    fn named_arrays(&self) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        let mut m = BTreeMap::new();
        self.visit(&mut |name, t| {
            m.insert(name, (t.shape(), t.values().to_vec()));
        });
        m
    }

    /// Copies values by name; every name must be present with equal length.
    fn load_arrays(&mut self, arrays: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |name, mut t| {
            if err.is_some() {
                return;
            }
            match arrays.get(&name) {
                Some((_, v)) if v.len() == t.values_mut().len() => t.values_mut().copy_from_slice(v),
                Some((_, v)) => {
                    err = Some(Error::Incompatible(format!(
                        "array {name} has {} values, expected {}",
                        v.len(),
                        t.values_mut().len()
                    )))
                }
                None => err = Some(Error::Incompatible(format!("missing array {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Residual 3D CNN mapping a one-channel volume to a latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub spec: ExtractorSpec,
    pub blocks: Vec<ResidualBlock>,
    pub fc: Linear,
}

/// Intermediate state kept by a training-mode forward pass.
#[derive(Debug)]
pub struct ExtractorTape {
    blocks: Vec<BlockTape>,
    pooled_from: Vec<usize>,
    pooled: Tensor,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(spec: ExtractorSpec, rng: &mut R) -> Result<Self> {
        spatial_schedule(spec.input_shape)?;
        if spec.base_channels == 0 || spec.latent_dim == 0 {
            return Err(Error::Config("base_channels and latent_dim must be positive".into()));
        }
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut cin = spec.in_channels;
        for i in 0..NUM_BLOCKS {
            let cout = spec.block_channels(i);
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ResidualBlock::new(cin, cout, stride, rng));
            cin = cout;
        }
        let fc = Linear::new(cin, spec.latent_dim, rng);
        Ok(FeatureExtractor { spec, blocks, fc })
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let [d, h, w] = self.spec.input_shape;
        let expected = [s.first().copied().unwrap_or(0), self.spec.in_channels, d, h, w];
        if s.len() != 5 || s[1..] != expected[1..] || s[0] == 0 {
            return Err(Error::Shape {
                expected: expected.to_vec(),
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass recording what backward needs. Train mode updates the
    /// batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ExtractorTape)> {
        self.check_input(x)?;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &mut self.blocks {
            let (out, tape) = block.forward(h, mode)?;
            tapes.push(tape);
            h = out;
        }
        let pooled = global_avg_pool(&h)?;
        let z = self.fc.forward(&pooled)?;
        Ok((
            z,
            ExtractorTape {
                blocks: tapes,
                pooled_from: h.shape().to_vec(),
                pooled,
            },
        ))
    }

    /// Evaluation-mode forward without recording anything.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.blocks[0].infer(x)?;
        for block in &self.blocks[1..] {
            h = block.infer(&h)?;
        }
        self.fc.forward(&global_avg_pool(&h)?)
    }

    /// Intermediate block outputs in evaluation mode.
    pub fn block_shapes(&self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        self.check_input(x)?;
        let mut shapes = Vec::new();
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.infer(&h)?;
            shapes.push(h.shape().to_vec());
        }
        Ok(shapes)
    }

    /// Accumulates parameter gradients for `dlatent`.
    pub fn backward(&mut self, tape: ExtractorTape, dlatent: &Tensor) -> Result<()> {
        let dpool = self.fc.backward(&tape.pooled, dlatent, true)?.expect("requested");
        let mut d = global_avg_pool_backward(&tape.pooled_from, &dpool);
        for (i, (block, bt)) in self.blocks.iter_mut().zip(tape.blocks).enumerate().rev() {
            match block.backward(bt, &d, i > 0)? {
                Some(dx) => d = dx,
                None => break,
            }
        }
        Ok(())
    }
}

impl Module for FeatureExtractor {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("extractor.block{}", i + 1), f);
        }
        visit_linear(&self.fc, "extractor.fc", f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("extractor.block{}", i + 1), f);
        }
        visit_linear_mut(&mut self.fc, "extractor.fc", f);
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub spec: HeadSpec,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug)]
pub struct HeadTape {
    input: Tensor,
    hidden: Tensor,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(spec: HeadSpec, rng: &mut R) -> Self {
        let fc1 = Linear::new(spec.in_dim, spec.hidden_dim, rng);
        let fc2 = Linear::new(spec.hidden_dim, spec.out_dim, rng);
        ProjectionHead { spec, fc1, fc2 }
    }

    pub fn kind(&self) -> HeadKind {
        self.spec.kind
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, HeadTape)> {
        let hidden = relu(&self.fc1.forward(z)?);
        let y = self.fc2.forward(&hidden)?;
        Ok((
            y,
            HeadTape {
                input: z.clone(),
                hidden,
            },
        ))
    }

    pub fn infer(&self, z: &Tensor) -> Result<Tensor> {
        self.forward(z).map(|(y, _)| y)
    }

    /// Returns the gradient for the head input.
    pub fn backward(&mut self, tape: HeadTape, dy: &Tensor) -> Result<Tensor> {
        let dh = self.fc2.backward(&tape.hidden, dy, true)?.expect("requested");
        let dh = relu_backward(&tape.hidden, &dh);
        Ok(self.fc1.backward(&tape.input, &dh, true)?.expect("requested"))
    }
}

impl Module for ProjectionHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        visit_linear(&self.fc1, "head.fc1", f);
        visit_linear(&self.fc2, "head.fc2", f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        visit_linear_mut(&mut self.fc1, "head.fc1", f);
        visit_linear_mut(&mut self.fc2, "head.fc2", f);
    }
}

/// Builds a freshly initialized extractor and head; deterministic for a
/// given rng state.
pub fn init_model<R: Rng + ?Sized>(
    config: &ExperimentConfig,
    head: HeadKind,
    rng: &mut R,
) -> Result<(FeatureExtractor, ProjectionHead)> {
    let extractor = FeatureExtractor::new(ExtractorSpec::from_config(config), rng)?;
    let head = ProjectionHead::new(HeadSpec::from_config(config, head), rng);
    Ok((extractor, head))
}

/// `[B, D, H, W]`-shaped volumes as a one-channel batch.
pub fn volumes_to_batch(shape: [usize; 3], volumes: &[&[f32]]) -> Result<Tensor> {
    Tensor::stack(&[1, shape[0], shape[1], shape[2]], volumes)
}

/// Latent vectors for a batch, evaluation mode.
pub fn forward_features(extractor: &FeatureExtractor, batch: &Tensor) -> Result<Tensor> {
    extractor.infer(batch)
}

/// Head outputs for a batch, evaluation mode.
pub fn forward_projected(extractor: &FeatureExtractor, head: &ProjectionHead, batch: &Tensor) -> Result<Tensor> {
    head.infer(&extractor.infer(batch)?)
}

/// A network whose parameters are locked. Only evaluation-mode forward
/// passes are available; batch-norm layers always use running statistics.
#[derive(Debug, Clone)]
pub struct Frozen<M> {
    inner: M,
}

pub fn freeze<M>(model: M) -> Frozen<M> {
    Frozen { inner: model }
}

impl<M: Module> Frozen<M> {
    pub fn get(&self) -> &M {
        &self.inner
    }

    /// Always empty: a frozen model exposes nothing to an optimizer.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        log::warn!("requested trainable parameters of a frozen model; returning none");
        Vec::new()
    }

    pub fn checksum(&self) -> String {
        self.inner.checksum()
    }

    pub fn grad_norm_sq(&self) -> f64 {
        self.inner.grad_norm_sq()
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl Frozen<FeatureExtractor> {
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.infer(x)
    }
}

/// Which point of the three-stage pipeline a set of weights comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    ThetaInit,
    ThetaPrime,
    PsiInit,
    PsiPrime,
    PsiFinal,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::ThetaInit => "theta_init",
            StageTag::ThetaPrime => "theta_prime",
            StageTag::PsiInit => "psi_init",
            StageTag::PsiPrime => "psi_prime",
            StageTag::PsiFinal => "psi_final",
        })
    }
}

/// Immutable snapshot of an extractor (and optionally its head).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub stage: StageTag,
    pub seed: u64,
    pub extractor_spec: ExtractorSpec,
    pub head_spec: Option<HeadSpec>,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl ModelWeights {
    pub fn capture(stage: StageTag, seed: u64, extractor: &FeatureExtractor, head: Option<&ProjectionHead>) -> Self {
        let mut arrays = extractor.named_arrays();
        if let Some(h) = head {
            arrays.extend(h.named_arrays());
        }
        ModelWeights {
            stage,
            seed,
            extractor_spec: extractor.spec.clone(),
            head_spec: head.map(|h| h.spec.clone()),
            arrays,
        }
    }

    pub fn fingerprint(&self) -> String {
        self.extractor_spec.fingerprint()
    }

    /// Content hash of every array, used to verify stage hand-offs.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, (_, values)) in &self.arrays {
            h.update(name.as_bytes());
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rebuilds the extractor; the architecture must match `spec`.
    pub fn extractor(&self, spec: &ExtractorSpec) -> Result<FeatureExtractor> {
        if spec != &self.extractor_spec {
            return Err(Error::Incompatible(format!(
                "extractor fingerprint {} does not match {} ({:?} vs {:?})",
                self.extractor_spec.fingerprint(),
                spec.fingerprint(),
                self.extractor_spec,
                spec
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut e = FeatureExtractor::new(spec.clone(), &mut rng)?;
        e.load_arrays(&self.arrays)?;
        Ok(e)
    }

    /// Rebuilds the head; fails if none was captured or the spec differs.
    pub fn head(&self, spec: &HeadSpec) -> Result<ProjectionHead> {
        match &self.head_spec {
            Some(s) if s == spec => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                let mut h = ProjectionHead::new(spec.clone(), &mut rng);
                h.load_arrays(&self.arrays)?;
                Ok(h)
            }
            Some(s) => Err(Error::Incompatible(format!("head {s:?} does not match {spec:?}"))),
            None => Err(Error::Incompatible("checkpoint carries no projection head".into())),
        }
    }
}
