//! The four-block convolutional encoder and its heads.
//!
//! Block `i` is conv3×3 → per-item instance norm → SiLU. Its pooled feature
//! is the global average of that activation, and blocks 1–3 hand a 2×2
//! average-pooled copy to the next block. Instance norm keeps every item
//! independent of whatever else is in the batch.
//!
//! Heads:
//! - `proj`: d₄ → hidden → proj_out, SiLU in between (h_proj)
//! - `prot`: proj_out → K, no bias, rows are unit-norm centroids (h_prot)
//! - `cl`:   d₄ → t (h_cl)
//! - `aux{i}` for i ∈ 1..=3: adapter dᵢ → d₄, SiLU, then d₄ → t (hⁱ_proj)

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::LogMelSpec;
use crate::error::{Error, Result};
use crate::nn::ops::{self, gemm};
use crate::nn::Blob;
use crate::rng;

pub const BLOCKS: usize = 4;
pub const AUX_HEADS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleProfile {
    Paper,
    Desk,
}

impl ScaleProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleProfile::Paper => "paper",
            ScaleProfile::Desk => "desk",
        }
    }
}

impl std::str::FromStr for ScaleProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ScaleProfile::Paper),
            "desk" => Ok(ScaleProfile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Integer divisor applied to every width in the desk profile.
pub const DESK_DIVISOR: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub profile: ScaleProfile,
    pub input_frames: usize,
    pub input_mels: usize,
    /// Output channels per block; these are also the pooled widths d₁..d₄.
    pub block_channels: [usize; BLOCKS],
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub prototypes: usize,
    pub classes: usize,
}

impl EncoderConfig {
    pub fn paper(classes: usize) -> Self {
        EncoderConfig {
            profile: ScaleProfile::Paper,
            input_frames: 96,
            input_mels: 64,
            block_channels: [256, 512, 1024, 2048],
            proj_hidden: 2048,
            proj_out: 512,
            prototypes: 512,
            classes,
        }
    }

    pub fn desk(classes: usize) -> Self {
        let paper = Self::paper(classes);
        EncoderConfig {
            profile: ScaleProfile::Desk,
            block_channels: paper.block_channels.map(|c| c / DESK_DIVISOR),
            proj_hidden: paper.proj_hidden / DESK_DIVISOR,
            proj_out: paper.proj_out / DESK_DIVISOR,
            prototypes: 8,
            ..paper
        }
    }

    pub fn for_profile(profile: ScaleProfile, classes: usize) -> Self {
        match profile {
            ScaleProfile::Paper => Self::paper(classes),
            ScaleProfile::Desk => Self::desk(classes),
        }
    }

    pub fn feature_dims(&self) -> [usize; BLOCKS] {
        self.block_channels
    }

    pub fn final_dim(&self) -> usize {
        self.block_channels[BLOCKS - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let mut widths = vec![
            self.proj_hidden,
            self.proj_out,
            self.prototypes,
            self.classes,
        ];
        widths.extend(self.block_channels);
        if widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths must be positive: {self:?}")));
        }
        // Three 2×2 poolings must leave at least one cell.
        if self.input_frames < 8 || self.input_mels < 8 {
            return Err(Error::Config(format!(
                "input {}×{} too small for three 2×2 poolings",
                self.input_frames, self.input_mels
            )));
        }
        Ok(())
    }

    /// Spatial size (height, width) seen by each block.
    pub fn block_geometry(&self) -> [(usize, usize); BLOCKS] {
        let mut out = [(0, 0); BLOCKS];
        let (mut h, mut w) = (self.input_frames, self.input_mels);
        for g in &mut out {
            *g = (h, w);
            h /= 2;
            w /= 2;
        }
        out
    }

    /// Closed-form parameter count of the convolutional blocks.
    pub fn block_param_count(&self, subset: ParamSubset) -> usize {
        let mut c_in = 1;
        let mut total = 0;
        for &c in &self.block_channels[..subset.block_count()] {
            total += c_in * c * 9 + c;
            c_in = c;
        }
        total
    }

    /// Closed-form parameter count of every blob, heads included.
    pub fn total_param_count(&self) -> usize {
        let d4 = self.final_dim();
        let proj = d4 * self.proj_hidden + self.proj_hidden + self.proj_hidden * self.proj_out + self.proj_out;
        let prot = self.prototypes * self.proj_out;
        let cl = d4 * self.classes + self.classes;
        let aux: usize = self.block_channels[..AUX_HEADS]
            .iter()
            .map(|&d| d * d4 + d4 + d4 * self.classes + self.classes)
            .sum();
        self.block_param_count(ParamSubset::Full) + proj + prot + cl + aux
    }

    /// Name and shape of every blob, in [`EncoderParams::visit`] order.
    pub fn blob_shapes(&self) -> Vec<(String, (usize, usize))> {
        fn mlp(out: &mut Vec<(String, (usize, usize))>, prefix: &str, inp: usize, hidden: usize, o: usize) {
            out.push((format!("{prefix}.0.weight"), (hidden, inp)));
            out.push((format!("{prefix}.0.bias"), (1, hidden)));
            out.push((format!("{prefix}.1.weight"), (o, hidden)));
            out.push((format!("{prefix}.1.bias"), (1, o)));
        }
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, &c) in self.block_channels.iter().enumerate() {
            out.push((format!("block{}.weight", i + 1), (c, c_in * 9)));
            out.push((format!("block{}.bias", i + 1), (1, c)));
            c_in = c;
        }
        let d4 = self.final_dim();
        mlp(&mut out, "proj", d4, self.proj_hidden, self.proj_out);
        out.push(("prot.weight".into(), (self.prototypes, self.proj_out)));
        out.push(("cl.weight".into(), (self.classes, d4)));
        out.push(("cl.bias".into(), (1, self.classes)));
        for (i, &d) in self.block_channels[..AUX_HEADS].iter().enumerate() {
            mlp(&mut out, &format!("aux{}", i + 1), d, d4, self.classes);
        }
        out
    }
}

/// Which blocks [`EncoderParams::count_parameters`] counts; heads never count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSubset {
    /// Blocks 1–3.
    Student,
    /// Blocks 1–4.
    Full,
}

impl ParamSubset {
    fn block_count(self) -> usize {
        match self {
            ParamSubset::Student => 3,
            ParamSubset::Full => 4,
        }
    }
}

/// Parameter groups, used to decide what an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Blocks,
    Projector,
    Prototype,
    Classifier,
    Aux,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("block") {
            ParamGroup::Blocks
        } else if name.starts_with("proj.") {
            ParamGroup::Projector
        } else if name.starts_with("prot.") {
            ParamGroup::Prototype
        } else if name.starts_with("cl.") {
            ParamGroup::Classifier
        } else {
            ParamGroup::Aux
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out × in]`
    pub weight: Blob,
    pub bias: Option<Blob>,
}

impl Linear {
    fn init<R: Rng + ?Sized>(inp: usize, out: usize, bias: bool, rng: &mut R) -> Self {
        Linear {
            weight: Blob::randn(out, inp, (1.0 / inp as f64).sqrt(), rng),
            bias: bias.then(|| Blob::zeros(1, out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        ops::linear(
            &self.weight.data,
            self.bias.as_ref().map(|b| b.data.as_slice()),
            self.weight.rows,
            x,
        )
    }

    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        ops::linear_backward(
            &self.weight.data,
            x,
            dy,
            &mut grad.weight.data,
            grad.bias.as_mut().map(|b| b.data.as_mut_slice()),
        )
    }
}

/// Linear → SiLU → Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

/// Intermediate values of one [`Mlp`] evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpOutput {
    /// Output of the first linear layer, before the nonlinearity.
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(inp: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Mlp {
            first: Linear::init(inp, hidden, true, rng),
            second: Linear::init(hidden, out, true, rng),
        }
    }

    pub fn forward(&self, x: &[f64]) -> MlpOutput {
        let hidden = self.first.forward(x);
        let act: Vec<f64> = hidden.iter().map(|&h| ops::silu(h)).collect();
        let out = self.second.forward(&act);
        MlpOutput { hidden, out }
    }

    /// `d_hidden_extra` is an additional gradient arriving directly at the
    /// pre-activation hidden layer.
    fn backward(
        &self,
        x: &[f64],
        fwd: &MlpOutput,
        d_out: &[f64],
        d_hidden_extra: Option<&[f64]>,
        grad: &mut Mlp,
    ) -> Vec<f64> {
        let act: Vec<f64> = fwd.hidden.iter().map(|&h| ops::silu(h)).collect();
        let d_act = self.second.backward(&act, d_out, &mut grad.second);
        let mut d_hidden: Vec<f64> = d_act
            .iter()
            .zip(&fwd.hidden)
            .map(|(g, &h)| g * ops::silu_grad(h))
            .collect();
        if let Some(extra) = d_hidden_extra {
            for (d, e) in d_hidden.iter_mut().zip(extra) {
                *d += e;
            }
        }
        self.first.backward(x, &d_hidden, &mut grad.first)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `[c_out × (c_in·9)]`
    pub weight: Blob,
    pub bias: Blob,
}

impl ConvBlock {
    pub fn in_channels(&self) -> usize {
        self.weight.cols / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows
    }
}

/// Every trainable tensor of an encoder plus its heads.
///
/// The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    pub proj: Mlp,
    /// `[K × proj_out]`, one centroid per row.
    pub prot: Blob,
    pub cl: Linear,
    pub aux: Vec<Mlp>,
}

/// Pooled per-block features of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFeatures {
    pub pooled: Vec<Vec<f64>>,
}

impl BlockFeatures {
    pub fn block(&self, i: usize) -> &[f64] {
        &self.pooled[i]
    }

    /// f(x): the block-4 pooled feature.
    pub fn final_features(&self) -> &[f64] {
        &self.pooled[BLOCKS - 1]
    }
}

struct BlockCache {
    cols: Vec<f64>,
    normed: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Activations retained for the backward pass of one item.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
}

/// Selects a head for [`EncoderParams::apply_head`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Projector,
    Prototype,
    Classifier,
    /// Auxiliary head on block `i` (1-based, 1..=3).
    Aux(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Vector(Vec<f64>),
    Aux { adapter: Vec<f64>, logits: Vec<f64> },
}

pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = rng::stage_rng(seed, "encoder-init");
    let mut blocks = Vec::with_capacity(BLOCKS);
    let mut c_in = 1;
    for &c in &cfg.block_channels {
        let fan_in = c_in * 9;
        blocks.push(ConvBlock {
            weight: Blob::randn(c, fan_in, (2.0 / fan_in as f64).sqrt(), &mut rng),
            bias: Blob::zeros(1, c),
        });
        c_in = c;
    }
    let d4 = cfg.final_dim();
    let proj = Mlp::init(d4, cfg.proj_hidden, cfg.proj_out, &mut rng);
    let mut prot = Blob::randn(cfg.prototypes, cfg.proj_out, 1.0, &mut rng);
    for k in 0..prot.rows {
        let row = prot.row_mut(k);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let cl = Linear::init(d4, cfg.classes, true, &mut rng);
    let aux = cfg.block_channels[..AUX_HEADS]
        .iter()
        .map(|&d| Mlp::init(d, d4, cfg.classes, &mut rng))
        .collect();
    Ok(EncoderParams {
        config: cfg.clone(),
        blocks,
        proj,
        prot,
        cl,
        aux,
    })
}

impl EncoderParams {
    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> EncoderParams {
        let mut z = self.clone();
        z.visit_mut(|_, b| b.fill(0.0));
        z
    }

    /// Visit every blob in a fixed order with its stable name.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a Blob)) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{}.weight", i + 1), &b.weight);
            f(&format!("block{}.bias", i + 1), &b.bias);
        }
        visit_mlp("proj", &self.proj, &mut f);
        f("prot.weight", &self.prot);
        visit_linear("cl", &self.cl, &mut f);
        for (i, m) in self.aux.iter().enumerate() {
            visit_mlp(&format!("aux{}", i + 1), m, &mut f);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Blob)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{}.weight", i + 1), &mut b.weight);
            f(&format!("block{}.bias", i + 1), &mut b.bias);
        }
        visit_mlp_mut("proj", &mut self.proj, &mut f);
        f("prot.weight", &mut self.prot);
        visit_linear_mut("cl", &mut self.cl, &mut f);
        for (i, m) in self.aux.iter_mut().enumerate() {
            visit_mlp_mut(&format!("aux{}", i + 1), m, &mut f);
        }
    }

    pub fn blob_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _| names.push(n.to_string()));
        names
    }

    /// `self += alpha * other`, blob by blob.
    pub fn axpy(&mut self, alpha: f64, other: &EncoderParams) {
        let mut theirs = Vec::new();
        other.visit(|_, b| theirs.push(b));
        let mut theirs = theirs.into_iter();
        self.visit_mut(|_, b| b.axpy(alpha, theirs.next().expect("same layout")));
    }

    /// Runtime parameter count of the convolutional blocks.
    pub fn count_parameters(&self, subset: ParamSubset) -> usize {
        self.blocks[..subset.block_count()]
            .iter()
            .map(|b| b.weight.len() + b.bias.len())
            .sum()
    }

    pub fn total_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, b| n += b.len());
        n
    }

    pub fn check_input(&self, spec: &LogMelSpec) -> Result<()> {
        let c = &self.config;
        if spec.frames != c.input_frames || spec.mel_bins != c.input_mels {
            return Err(Error::contract(format!(
                "encoder expects {}×{} input, got {}×{}",
                c.input_frames, c.input_mels, spec.frames, spec.mel_bins
            )));
        }
        Ok(())
    }

    /// Pooled features of every block in one pass.
    pub fn forward(&self, spec: &LogMelSpec) -> Result<BlockFeatures> {
        self.check_input(spec)?;
        Ok(self.forward_cached(&input_map(spec)).0)
    }

    pub fn forward_batch(&self, specs: &[&LogMelSpec]) -> Result<Vec<BlockFeatures>> {
        for s in specs {
            self.check_input(s)?;
        }
        Ok(crate::par::map(specs, |s| self.forward_cached(&input_map(s)).0))
    }

    /// Forward pass over a `[frames × mels]` f64 input map, keeping the
    /// activations needed by [`Self::backward_blocks`].
    pub fn forward_cached(&self, input: &[f64]) -> (BlockFeatures, ForwardCache) {
        self.forward_depth(input, BLOCKS)
    }

    /// Pooled features of blocks 1–3 only; block 4 is never evaluated.
    pub fn student_features(&self, input: &[f64]) -> Result<Vec<f64>> {
        let want = self.config.input_frames * self.config.input_mels;
        if input.len() != want {
            return Err(Error::contract(format!("input width {} vs encoder {want}", input.len())));
        }
        let (mut f, _) = self.forward_depth(input, AUX_HEADS);
        Ok(f.pooled.pop().expect("three blocks"))
    }

    fn forward_depth(&self, input: &[f64], depth: usize) -> (BlockFeatures, ForwardCache) {
        let geometry = self.config.block_geometry();
        let mut x = input.to_vec();
        let mut c_in = 1;
        let mut pooled = Vec::with_capacity(BLOCKS);
        let mut caches = Vec::with_capacity(BLOCKS);
        for (i, block) in self.blocks.iter().enumerate().take(depth) {
            let (h, w) = geometry[i];
            let hw = h * w;
            let c_out = block.out_channels();
            let cols = ops::im2col3(&x, c_in, h, w);
            let mut conv = vec![0.0; c_out * hw];
            for (o, plane) in conv.chunks_mut(hw).enumerate() {
                plane.fill(block.bias.data[o]);
            }
            gemm(c_out, c_in * 9, hw, 1.0, &block.weight.data, false, &cols, false, 1.0, &mut conv);
            let (normed, inv_std) = ops::instance_norm(&conv, c_out, hw);
            let act: Vec<f64> = normed.iter().map(|&v| ops::silu(v)).collect();
            pooled.push(ops::global_avg(&act, c_out, hw));
            if i + 1 < BLOCKS {
                x = ops::avg_pool2(&act, c_out, h, w);
            }
            caches.push(BlockCache {
                cols,
                normed,
                inv_std,
            });
            c_in = c_out;
        }
        (BlockFeatures { pooled }, ForwardCache { blocks: caches })
    }

    /// Back-propagate gradients arriving at each block's pooled feature
    /// (`None` = no gradient) into `grad`'s block tensors.
    pub fn backward_blocks(
        &self,
        cache: &ForwardCache,
        d_pooled: &[Option<Vec<f64>>; BLOCKS],
        grad: &mut EncoderParams,
    ) {
        let geometry = self.config.block_geometry();
        // Highest block that receives any gradient; nothing above needs work.
        let Some(highest) = d_pooled.iter().rposition(Option::is_some) else {
            return;
        };
        let mut d_from_above: Option<Vec<f64>> = None;
        for i in (0..=highest).rev() {
            let (h, w) = geometry[i];
            let hw = h * w;
            let block = &self.blocks[i];
            let c_out = block.out_channels();
            let c_in = block.in_channels();
            let bc = &cache.blocks[i];
            let mut d_act = match d_from_above.take() {
                Some(d) => ops::avg_pool2_backward(&d, c_out, h, w),
                None => vec![0.0; c_out * hw],
            };
            if let Some(dp) = &d_pooled[i] {
                for (ch, g) in dp.iter().enumerate() {
                    let g = g / hw as f64;
                    d_act[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d += g);
                }
            }
            for (d, &v) in d_act.iter_mut().zip(&bc.normed) {
                *d *= ops::silu_grad(v);
            }
            let d_conv = ops::instance_norm_backward(&bc.normed, &bc.inv_std, &d_act, hw);
            let gb = &mut grad.blocks[i];
            gemm(c_out, hw, c_in * 9, 1.0, &d_conv, false, &bc.cols, true, 1.0, &mut gb.weight.data);
            for (o, plane) in d_conv.chunks(hw).enumerate() {
                gb.bias.data[o] += plane.iter().sum::<f64>();
            }
            if i > 0 {
                let mut d_cols = vec![0.0; c_in * 9 * hw];
                gemm(c_in * 9, c_out, hw, 1.0, &block.weight.data, true, &d_conv, false, 0.0, &mut d_cols);
                d_from_above = Some(ops::col2im3(&d_cols, c_in, h, w));
            }
        }
    }

    pub fn project(&self, final_features: &[f64]) -> MlpOutput {
        self.proj.forward(final_features)
    }

    pub fn project_backward(&self, x: &[f64], fwd: &MlpOutput, d_out: &[f64], grad: &mut EncoderParams) -> Vec<f64> {
        self.proj.backward(x, fwd, d_out, None, &mut grad.proj)
    }

    /// Unnormalized prototype logits `C^T g`.
    pub fn prototype_logits(&self, g: &[f64]) -> Vec<f64> {
        ops::linear(&self.prot.data, None, self.prot.rows, g)
    }

    /// Gradient w.r.t. `g` only; the prototype head never accumulates a
    /// weight gradient.
    pub fn prototype_backward(&self, d_logits: &[f64]) -> Vec<f64> {
        let mut dg = vec![0.0; self.prot.cols];
        for (k, &g) in d_logits.iter().enumerate() {
            for (d, w) in dg.iter_mut().zip(self.prot.row(k)) {
                *d += g * w;
            }
        }
        dg
    }

    pub fn classify(&self, final_features: &[f64]) -> Vec<f64> {
        self.cl.forward(final_features)
    }

    pub fn classify_backward(&self, x: &[f64], d_logits: &[f64], grad: &mut EncoderParams) -> Vec<f64> {
        self.cl.backward(x, d_logits, &mut grad.cl)
    }

    /// Auxiliary head on block `i` (0-based): `hidden` is the adapter output
    /// uⁱ, `out` the logits zⁱ.
    pub fn aux_head(&self, i: usize, pooled: &[f64]) -> MlpOutput {
        self.aux[i].forward(pooled)
    }

    pub fn aux_backward(
        &self,
        i: usize,
        x: &[f64],
        fwd: &MlpOutput,
        d_logits: &[f64],
        d_adapter: Option<&[f64]>,
        grad: &mut EncoderParams,
    ) -> Vec<f64> {
        self.aux[i].backward(x, fwd, d_logits, d_adapter, &mut grad.aux[i])
    }

    pub fn apply_head(&self, head: Head, input: &[f64]) -> Result<HeadOutput> {
        let expect = |want: usize| {
            if input.len() == want {
                Ok(())
            } else {
                Err(Error::contract(format!(
                    "{head:?} expects input width {want}, got {}",
                    input.len()
                )))
            }
        };
        match head {
            Head::Projector => {
                expect(self.proj.first.in_dim())?;
                Ok(HeadOutput::Vector(self.project(input).out))
            }
            Head::Prototype => {
                expect(self.prot.cols)?;
                Ok(HeadOutput::Vector(self.prototype_logits(input)))
            }
            Head::Classifier => {
                expect(self.cl.in_dim())?;
                Ok(HeadOutput::Vector(self.classify(input)))
            }
            Head::Aux(i) => {
                if !(1..=AUX_HEADS).contains(&i) {
                    return Err(Error::contract(format!("no auxiliary head {i}")));
                }
                expect(self.aux[i - 1].first.in_dim())?;
                let o = self.aux_head(i - 1, input);
                Ok(HeadOutput::Aux {
                    adapter: o.hidden,
                    logits: o.out,
                })
            }
        }
    }

    /// Overwrite the prototype head with centroid rows.
    pub fn set_prototypes(&mut self, centroid_rows: &Blob) -> Result<()> {
        if centroid_rows.shape() != self.prot.shape() {
            return Err(Error::DimensionMismatch {
                blob: "prot.weight".into(),
                expected: self.prot.shape(),
                found: centroid_rows.shape(),
            });
        }
        self.prot = centroid_rows.clone();
        Ok(())
    }
}

/// f64 copy of a spec laid out as the encoder's 1-channel input map.
pub fn input_map(spec: &LogMelSpec) -> Vec<f64> {
    spec.values.iter().map(|&v| v as f64).collect()
}

fn visit_linear<'a>(prefix: &str, l: &'a Linear, f: &mut impl FnMut(&str, &'a Blob)) {
    f(&format!("{prefix}.weight"), &l.weight);
    if let Some(b) = &l.bias {
        f(&format!("{prefix}.bias"), b);
    }
}

fn visit_linear_mut(prefix: &str, l: &mut Linear, f: &mut impl FnMut(&str, &mut Blob)) {
    f(&format!("{prefix}.weight"), &mut l.weight);
    if let Some(b) = &mut l.bias {
        f(&format!("{prefix}.bias"), b);
    }
}

fn visit_mlp<'a>(prefix: &str, m: &'a Mlp, f: &mut impl FnMut(&str, &'a Blob)) {
    visit_linear(&format!("{prefix}.0"), &m.first, f);
    visit_linear(&format!("{prefix}.1"), &m.second, f);
}

fn visit_mlp_mut(prefix: &str, m: &mut Mlp, f: &mut impl FnMut(&str, &mut Blob)) {
    visit_linear_mut(&format!("{prefix}.0"), &mut m.first, f);
    visit_linear_mut(&format!("{prefix}.1"), &mut m.second, f);
}
