//! Block and stage assembly: the convolutional stem, MBConv stage,
//! transformer stages with interleaved window/coordinator attention,
//! downsampling, coordinator threading across stages, and the classifier.
//!
//! Stage layout for a `[B, 3, H, W]` input:
//! * stem: two 3×3 stride-2 convs (norm + GELU between) -> `H/4`, `conv_dim`
//! * stage 1: MBConv blocks at `H/4`
//! * downsample -> `H/8`; the coordinator generator taps this feature map
//! * stages 2–4: transformer blocks per the interaction schedule, with
//!   token merging carrying coordinators across each stage boundary
//! * head: norm -> token mean -> linear.

use crate::attention::{CoordinatorMode, GcwaOp, GgcaOp, WsaOp};
use crate::coordinator::{
    anchor_loss, generate_coordinators, token_merge, AnchorLossTerms, GeneratorWeights,
    TokenMergeWeights,
};
use crate::error::{Error, Result};
use crate::layers::{join, Conv2dLayer, LayerNorm, Linear, ParamVisitor};
use crate::macs;
use crate::ops::Conv2dSpec;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MBCONV_EXPAND: usize = 4;
pub const MBCONV_SE_REDUCTION: usize = 4;
pub const COORD_FFN_RATIO: usize = 3;

// ---- configuration ----------------------------------------------------------

/// Declarative description of a model variant. Transformer-stage lists
/// (`heads`, `mlp_ratio`, `window`, `interaction`) cover stages 2–4;
/// `depths` covers all four stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub conv_dim: usize,
    pub head_dim: usize,
    pub heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub mlp_ratio: Vec<usize>,
    pub window: Vec<usize>,
    pub interaction: Vec<i64>,
    pub coordinators: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Optional explicit transformer dims; must match `heads·head_dim`.
    pub dims_override: Option<Vec<usize>>,
    /// Drop the whole coordinator path (generator, mergers, CoCA blocks).
    pub no_coordinators: bool,
}

impl ModelConfig {
    /// Built-in variants. `11M`/`21M`/`28M` are the published scales;
    /// `nano` is a desk-scale configuration for tests and toy training.
    pub fn variant(name: &str) -> Option<ModelConfig> {
        let base = |name: &str, conv_dim: usize, heads: [usize; 3], depth3: usize| ModelConfig {
            name: name.to_string(),
            conv_dim,
            head_dim: 24,
            heads: heads.to_vec(),
            depths: vec![2, 2, depth3, 2],
            mlp_ratio: vec![5, 4, 3],
            window: vec![7, 7, 7],
            interaction: vec![2, 3, -1],
            coordinators: 16,
            num_classes: 1000,
            image_size: 224,
            dims_override: None,
            no_coordinators: false,
        };
        match name {
            "11M" => Some(base("11M", 72, [4, 8, 14], 12)),
            "21M" => Some(base("21M", 96, [6, 12, 18], 12)),
            "28M" => Some(base("28M", 96, [6, 12, 18], 15)),
            "nano" => Some(ModelConfig {
                name: "nano".to_string(),
                conv_dim: 8,
                head_dim: 4,
                heads: vec![2, 2, 2],
                depths: vec![1, 1, 2, 1],
                mlp_ratio: vec![5, 4, 3],
                window: vec![4, 4, 4],
                interaction: vec![2, 2, -1],
                coordinators: 4,
                num_classes: 4,
                image_size: 32,
                dims_override: None,
                no_coordinators: false,
            }),
            _ => None,
        }
    }

    /// Channel dims of all four stages.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.conv_dim];
        dims.extend(self.heads.iter().map(|&h| h * self.head_dim));
        dims
    }

    /// Grid side of transformer stage `s` (0-based over stages 2–4).
    pub fn grid_side(&self, s: usize) -> usize {
        self.image_size / (8 << s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != 4 {
            return Err(Error::config(format!(
                "depths must list 4 stages, got {}",
                self.depths.len()
            )));
        }
        for (field, len) in [
            ("heads", self.heads.len()),
            ("mlp_ratio", self.mlp_ratio.len()),
            ("window", self.window.len()),
            ("interaction", self.interaction.len()),
        ] {
            if len != 3 {
                return Err(Error::config(format!(
                    "{field} must list 3 transformer stages, got {len}"
                )));
            }
        }
        if self.head_dim == 0 || self.conv_dim == 0 {
            return Err(Error::config("head_dim and conv_dim must be positive"));
        }
        if self.heads.iter().any(|&h| h == 0) {
            return Err(Error::config("head counts must be positive"));
        }
        if self.window.iter().any(|&w| w == 0) {
            return Err(Error::config("window sides must be positive"));
        }
        for (s, &f) in self.interaction.iter().enumerate() {
            if f == 0 || (f < 0 && f != -1) {
                return Err(Error::config(format!(
                    "stage{}: interaction must be -1 or a positive frequency, got {f}",
                    s + 2
                )));
            }
        }
        for s in 0..2 {
            if self.mlp_ratio[s] < self.mlp_ratio[s + 1] {
                return Err(Error::config(format!(
                    "mlp_ratio must be non-increasing across stages, got {:?}",
                    self.mlp_ratio
                )));
            }
        }
        if let Some(dims) = &self.dims_override {
            if dims.len() != 3 {
                return Err(Error::config("dims must list 3 transformer stages"));
            }
            for (s, (&d, &h)) in dims.iter().zip(self.heads.iter()).enumerate() {
                if d != h * self.head_dim {
                    return Err(Error::config(format!(
                        "stage{}: dim {d} != heads {h} x head_dim {}",
                        s + 2,
                        self.head_dim
                    )));
                }
            }
        }
        for (s, (&r, &h)) in self.mlp_ratio.iter().zip(self.heads.iter()).enumerate() {
            let c = h * self.head_dim;
            if (r * c) % 2 != 0 {
                return Err(Error::config(format!(
                    "stage{}: expanded GLU dim {} is odd and cannot be halved",
                    s + 2,
                    r * c
                )));
            }
        }
        if !self.no_coordinators && self.coordinators == 0 {
            return Err(Error::config(
                "coordinator count must be >= 1 (or disable coordinators)",
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        Ok(())
    }
}

// ---- block planning -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Wsa,
    Coca,
}

/// Per-transformer-stage ordered block kinds.
pub type BlockPlan = Vec<Vec<BlockKind>>;

/// With interaction frequency `f > 0`, blocks whose 1-based index is
/// divisible by `f` are CoCA blocks; `f == -1` makes the whole stage
/// window-attention only.
pub fn plan_blocks(depths: &[usize], interaction: &[i64]) -> Result<BlockPlan> {
    if depths.len() != interaction.len() {
        return Err(Error::config(format!(
            "plan_blocks: {} depths vs {} interaction entries",
            depths.len(),
            interaction.len()
        )));
    }
    depths
        .iter()
        .zip(interaction.iter())
        .enumerate()
        .map(|(s, (&depth, &f))| {
            if f == 0 || (f < 0 && f != -1) {
                return Err(Error::config(format!(
                    "stage{}: interaction frequency must be -1 or positive, got {f}",
                    s + 2
                )));
            }
            Ok((1..=depth)
                .map(|idx| {
                    if f > 0 && idx % (f as usize) == 0 {
                        BlockKind::Coca
                    } else {
                        BlockKind::Wsa
                    }
                })
                .collect())
        })
        .collect()
}

// ---- layers -----------------------------------------------------------------

/// Inverted-residual conv block: expand 1×1 -> depthwise 3×3 -> SE ->
/// project 1×1, with a residual connection.
pub struct MbConvBlock<T: Scalar> {
    pub expand: Conv2dLayer<T>,
    pub norm1: LayerNorm<T>,
    pub dwconv: Conv2dLayer<T>,
    pub norm2: LayerNorm<T>,
    pub se: crate::coordinator::SeWeights<T>,
    pub project: Conv2dLayer<T>,
    pub norm3: LayerNorm<T>,
}

impl<T: Scalar> MbConvBlock<T> {
    pub fn init(rng: &mut Rng, channels: usize) -> Result<Self> {
        let hidden = MBCONV_EXPAND * channels;
        Ok(MbConvBlock {
            expand: Conv2dLayer::init(rng, hidden, channels, 1, Conv2dSpec::default(), true),
            norm1: LayerNorm::init(hidden),
            dwconv: Conv2dLayer::init(
                rng,
                hidden,
                1,
                3,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    groups: hidden,
                },
                true,
            ),
            norm2: LayerNorm::init(hidden),
            se: crate::coordinator::SeWeights::init(rng, hidden, MBCONV_SE_REDUCTION)?,
            project: Conv2dLayer::init(rng, channels, hidden, 1, Conv2dSpec::default(), true),
            norm3: LayerNorm::init(channels),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm1.forward_channels(&self.expand.forward(x)?)?.gelu()?;
        let h = self.norm2.forward_channels(&self.dwconv.forward(&h)?)?.gelu()?;
        let h = h.mul(&self.se.gate(&h)?)?;
        let h = self.norm3.forward_channels(&self.project.forward(&h)?)?;
        x.add(&h)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.dwconv.visit(&join(prefix, "dwconv"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.se.visit(&join(prefix, "se"), f);
        self.project.visit(&join(prefix, "project"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
    }
}

/// Gated feed-forward: expand to `ratio·C`, depthwise-convolve half the
/// channels into a GELU gate for the other half, project back.
pub struct ConvGlu<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub dwconv: Conv2dLayer<T>,
    pub fc2: Linear<T>,
    pub hidden: usize,
}

impl<T: Scalar> ConvGlu<T> {
    pub fn init(rng: &mut Rng, dim: usize, ratio: usize) -> Result<Self> {
        let expanded = ratio * dim;
        if expanded % 2 != 0 {
            return Err(Error::config(format!(
                "conv_glu: expanded dim {expanded} is odd, cannot split halves"
            )));
        }
        let hidden = expanded / 2;
        Ok(ConvGlu {
            norm: LayerNorm::init(dim),
            fc1: Linear::init(rng, dim, expanded, true),
            dwconv: Conv2dLayer::init(
                rng,
                hidden,
                1,
                3,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    groups: hidden,
                },
                true,
            ),
            fc2: Linear::init(rng, hidden, dim, true),
            hidden,
        })
    }

    /// `[B, h, w, C]` -> `[B, h, w, C]` with residual.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let t = self.fc1.forward(&self.norm.forward(x)?)?;
        let value = t.narrow(3, 0, self.hidden)?;
        let gate_in = t.narrow(3, self.hidden, self.hidden)?;
        let gate = self
            .dwconv
            .forward(&gate_in.permute(&[0, 3, 1, 2])?)?
            .permute(&[0, 2, 3, 1])?
            .gelu()?;
        let out = self.fc2.forward(&value.mul(&gate)?)?;
        debug_assert_eq!(out.shape(), vec![b, h, w, shape[3]]);
        x.add(&out)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.dwconv.visit(&join(prefix, "dwconv"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Plain 2-layer MLP with pre-norm and residual, applied to coordinators
/// after their attention update.
pub struct CoordFfn<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> CoordFfn<T> {
    pub fn init(rng: &mut Rng, dim: usize) -> Self {
        CoordFfn {
            norm: LayerNorm::init(dim),
            fc1: Linear::init(rng, dim, COORD_FFN_RATIO * dim, true),
            fc2: Linear::init(rng, COORD_FFN_RATIO * dim, dim, true),
        }
    }

    pub fn forward(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc2.forward(&self.fc1.forward(&self.norm.forward(g)?)?.gelu()?)?;
        g.add(&h)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

pub struct WsaBlock<T: Scalar> {
    pub attn: WsaOp<T>,
    pub glu: ConvGlu<T>,
}

pub struct CocaBlock<T: Scalar> {
    pub ggca: GgcaOp<T>,
    pub coord_ffn: CoordFfn<T>,
    pub gcwa: GcwaOp<T>,
    pub glu: ConvGlu<T>,
}

pub enum Block<T: Scalar> {
    Wsa(WsaBlock<T>),
    Coca(CocaBlock<T>),
}

impl<T: Scalar> Block<T> {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Wsa(_) => BlockKind::Wsa,
            Block::Coca(_) => BlockKind::Coca,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match self {
            Block::Wsa(b) => {
                b.attn.visit(&join(prefix, "attn"), f);
                b.glu.visit(&join(prefix, "glu"), f);
            }
            Block::Coca(b) => {
                b.ggca.visit(&join(prefix, "ggca"), f);
                b.coord_ffn.visit(&join(prefix, "coord_ffn"), f);
                b.gcwa.visit(&join(prefix, "gcwa"), f);
                b.glu.visit(&join(prefix, "glu"), f);
            }
        }
    }
}

// ---- profiling ---------------------------------------------------------------

/// Per-layer MAC rows recorded during an instrumented forward.
#[derive(Debug, Default)]
pub struct Profiler {
    pub rows: Vec<(String, u64)>,
}

// ---- model --------------------------------------------------------------------

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub plan: BlockPlan,
    stem_conv1: Conv2dLayer<T>,
    stem_norm: LayerNorm<T>,
    stem_conv2: Conv2dLayer<T>,
    stage1: Vec<MbConvBlock<T>>,
    downsamples: Vec<(Conv2dLayer<T>, LayerNorm<T>)>,
    generator: Option<GeneratorWeights<T>>,
    stages: Vec<Vec<Block<T>>>,
    mergers: Vec<Option<TokenMergeWeights<T>>>,
    head_norm: LayerNorm<T>,
    head: Linear<T>,
}

/// Everything a forward pass returns: class logits, the generated
/// coordinators (before any block updates), and their anchor-loss terms.
pub struct ForwardOutput<T: Scalar> {
    pub logits: Tensor<T>,
    pub coordinators: Option<Tensor<T>>,
    pub anchor: Option<AnchorLossTerms<T>>,
}

/// Block plan the builder will realize: disabling coordinators turns every
/// stage into plain window attention.
pub fn effective_plan(config: &ModelConfig) -> Result<BlockPlan> {
    let interaction: Vec<i64> = if config.no_coordinators {
        vec![-1; 3]
    } else {
        config.interaction.clone()
    };
    plan_blocks(&config.depths[1..], &interaction)
}

/// Build a model from its configuration; all weights drawn from `rng`.
pub fn build_model<T: Scalar>(config: &ModelConfig, rng: &mut Rng) -> Result<Model<T>> {
    config.validate()?;
    let dims = config.dims();
    let plan = effective_plan(config)?;

    let stem_conv1 = Conv2dLayer::init(
        rng,
        config.conv_dim,
        3,
        3,
        Conv2dSpec {
            stride: 2,
            padding: 1,
            groups: 1,
        },
        true,
    );
    let stem_norm = LayerNorm::init(config.conv_dim);
    let stem_conv2 = Conv2dLayer::init(
        rng,
        config.conv_dim,
        config.conv_dim,
        3,
        Conv2dSpec {
            stride: 2,
            padding: 1,
            groups: 1,
        },
        true,
    );

    let stage1 = (0..config.depths[0])
        .map(|_| MbConvBlock::init(rng, config.conv_dim))
        .collect::<Result<Vec<_>>>()?;

    let downsamples = (0..3)
        .map(|s| {
            let conv = Conv2dLayer::init(
                rng,
                dims[s + 1],
                dims[s],
                3,
                Conv2dSpec {
                    stride: 2,
                    padding: 1,
                    groups: 1,
                },
                true,
            );
            (conv, LayerNorm::init(dims[s + 1]))
        })
        .collect();

    let generator = if config.no_coordinators {
        None
    } else {
        Some(GeneratorWeights::init(rng, dims[1], config.coordinators)?)
    };

    let mut stages = Vec::with_capacity(3);
    for s in 0..3 {
        let dim = dims[s + 1];
        let heads = config.heads[s];
        let window = config.window[s];
        let ratio = config.mlp_ratio[s];
        let mut blocks = Vec::with_capacity(plan[s].len());
        for kind in &plan[s] {
            let block = match kind {
                BlockKind::Wsa => Block::Wsa(WsaBlock {
                    attn: WsaOp::init(rng, dim, heads, window)?,
                    glu: ConvGlu::init(rng, dim, ratio)?,
                }),
                BlockKind::Coca => Block::Coca(CocaBlock {
                    ggca: GgcaOp::init(rng, dim, heads)?,
                    coord_ffn: CoordFfn::init(rng, dim),
                    gcwa: GcwaOp::init(rng, dim, heads, window)?,
                    glu: ConvGlu::init(rng, dim, ratio)?,
                }),
            };
            blocks.push(block);
        }
        stages.push(blocks);
    }

    let mergers = (0..2)
        .map(|s| {
            if config.no_coordinators {
                None
            } else {
                Some(TokenMergeWeights::init(
                    rng,
                    config.coordinators,
                    dims[s + 1],
                    dims[s + 2],
                ))
            }
        })
        .collect();

    let head_norm = LayerNorm::init(dims[3]);
    let head = Linear::init(rng, dims[3], config.num_classes, true);

    Ok(Model {
        config: config.clone(),
        plan,
        stem_conv1,
        stem_norm,
        stem_conv2,
        stage1,
        downsamples,
        generator,
        stages,
        mergers,
        head_norm,
        head,
    })
}

impl<T: Scalar> Model<T> {
    pub fn forward(&self, images: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.forward_opts(images, CoordinatorMode::Active, None)
    }

    /// Forward with an explicit coordinator mode and optional per-layer
    /// MAC profiling.
    pub fn forward_opts(
        &self,
        images: &Tensor<T>,
        mode: CoordinatorMode,
        mut profiler: Option<&mut Profiler>,
    ) -> Result<ForwardOutput<T>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::BadShape {
                op: "forward",
                shape,
                detail: "expects [B, 3, H, W] images".to_string(),
            });
        }
        if shape[2] != self.config.image_size || shape[3] != self.config.image_size {
            return Err(Error::BadShape {
                op: "forward",
                shape,
                detail: format!("configured image size is {}", self.config.image_size),
            });
        }

        let scope = |prof: &mut Option<&mut Profiler>,
                         name: String,
                         f: &mut dyn FnMut() -> Result<Tensor<T>>|
         -> Result<Tensor<T>> {
            match prof {
                Some(p) => {
                    let before = macs::total();
                    let out = f().map_err(|e| e.in_layer(&name))?;
                    p.rows.push((name, macs::total() - before));
                    Ok(out)
                }
                None => f().map_err(|e| e.in_layer(&name)),
            }
        };

        // stem
        let mut x = scope(&mut profiler, "stem.conv1".into(), &mut || {
            self.stem_conv1.forward(images)
        })?;
        x = self
            .stem_norm
            .forward_channels(&x)
            .map_err(|e| e.in_layer("stem.norm"))?
            .gelu()?;
        x = scope(&mut profiler, "stem.conv2".into(), &mut || {
            self.stem_conv2.forward(&x)
        })?;

        // stage 1: MBConv
        for (i, block) in self.stage1.iter().enumerate() {
            let name = format!("stage1.block{i}");
            x = scope(&mut profiler, name, &mut || block.forward(&x))?;
        }

        // downsample into stage 2; the generator taps this map
        x = scope(&mut profiler, "downsample1".into(), &mut || {
            let (conv, norm) = &self.downsamples[0];
            norm.forward_channels(&conv.forward(&x)?)
        })?;

        let (mut coords, generated, anchor) = match &self.generator {
            Some(gen) => {
                let g = scope(&mut profiler, "generator".into(), &mut || {
                    generate_coordinators(&x, gen)
                })?;
                let terms = anchor_loss(&g).map_err(|e| e.in_layer("anchor_loss"))?;
                (Some(g.clone()), Some(g), Some(terms))
            }
            None => (None, None, None),
        };

        // channels-last for the transformer stages
        let mut grid = x.permute(&[0, 2, 3, 1])?;

        for s in 0..3 {
            for (i, block) in self.stages[s].iter().enumerate() {
                let name = format!("stage{}.block{i}", s + 2);
                match block {
                    Block::Wsa(b) => {
                        grid = scope(&mut profiler, format!("{name}.attn"), &mut || {
                            b.attn.forward(&grid)
                        })?;
                        grid = scope(&mut profiler, format!("{name}.glu"), &mut || {
                            b.glu.forward(&grid)
                        })?;
                    }
                    Block::Coca(b) => {
                        let g = coords
                            .as_ref()
                            .ok_or_else(|| {
                                Error::config(format!("{name}: CoCA block without coordinators"))
                            })?
                            .clone();
                        let g = match mode {
                            CoordinatorMode::Off => g,
                            _ => {
                                let g1 = scope(&mut profiler, format!("{name}.ggca"), &mut || {
                                    b.ggca.forward(&g, &grid)
                                })?;
                                scope(&mut profiler, format!("{name}.coord_ffn"), &mut || {
                                    b.coord_ffn.forward(&g1)
                                })?
                            }
                        };
                        grid = scope(&mut profiler, format!("{name}.gcwa"), &mut || {
                            b.gcwa.forward(&grid, &g, mode)
                        })?;
                        grid = scope(&mut profiler, format!("{name}.glu"), &mut || {
                            b.glu.forward(&grid)
                        })?;
                        coords = Some(g);
                    }
                }
            }
            if s < 2 {
                // downsample between transformer stages
                let name = format!("downsample{}", s + 2);
                grid = scope(&mut profiler, name, &mut || {
                    let (conv, norm) = &self.downsamples[s + 1];
                    let nchw = grid.permute(&[0, 3, 1, 2])?;
                    norm.forward_channels(&conv.forward(&nchw)?)?
                        .permute(&[0, 2, 3, 1])
                })?;
                if let (Some(g), Some(merger)) = (&coords, &self.mergers[s]) {
                    let gm = scope(&mut profiler, format!("merge{}", s + 2), &mut || {
                        token_merge(g, merger)
                    })?;
                    coords = Some(gm);
                }
            }
        }

        // classifier head
        let logits = scope(&mut profiler, "head".into(), &mut || {
            let shape = grid.shape();
            let normed = self.head_norm.forward(&grid)?;
            let tokens = normed.reshape(&[shape[0], shape[1] * shape[2], shape[3]])?;
            let pooled = tokens.mean_axis(1)?;
            self.head.forward(&pooled)
        })?;

        Ok(ForwardOutput {
            logits,
            coordinators: generated,
            anchor,
        })
    }

    /// Visit every parameter with its hierarchical name. Order is fixed.
    pub fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        self.stem_conv1.visit("stem.conv1", f);
        self.stem_norm.visit("stem.norm", f);
        self.stem_conv2.visit("stem.conv2", f);
        for (i, b) in self.stage1.iter().enumerate() {
            b.visit(&format!("stage1.block{i}"), f);
        }
        for (i, (conv, norm)) in self.downsamples.iter().enumerate() {
            conv.visit(&format!("downsample{}.conv", i + 1), f);
            norm.visit(&format!("downsample{}.norm", i + 1), f);
        }
        if let Some(gen) = &self.generator {
            gen.visit("generator", f);
        }
        for (s, blocks) in self.stages.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                b.visit(&format!("stage{}.block{i}", s + 2), f);
            }
        }
        for (s, merger) in self.mergers.iter().enumerate() {
            if let Some(m) = merger {
                m.visit(&format!("merge{}", s + 2), f);
            }
        }
        self.head_norm.visit("head.norm", f);
        self.head.visit("head.fc", f);
    }

    /// All parameters in visiting order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0usize;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Parameter totals grouped by top-level component.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        self.visit_params(&mut |name, t| {
            let group = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += t.numel(),
                None => groups.push((group, t.numel())),
            }
        });
        groups
    }

    pub fn zero_grads(&self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_examples() {
        // depth 12, f=3: CoCA at 3, 6, 9, 12
        let plan = plan_blocks(&[12], &[3]).unwrap();
        let coca: Vec<usize> = plan[0]
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == BlockKind::Coca)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(coca, vec![3, 6, 9, 12]);

        // depth 2, f=2: [WSA, CoCA]
        let plan = plan_blocks(&[2], &[2]).unwrap();
        assert_eq!(plan[0], vec![BlockKind::Wsa, BlockKind::Coca]);

        // f = -1: all WSA
        let plan = plan_blocks(&[5], &[-1]).unwrap();
        assert!(plan[0].iter().all(|k| *k == BlockKind::Wsa));

        // f = 0 is rejected
        assert!(plan_blocks(&[2], &[0]).is_err());
    }

    #[test]
    fn variant_dims() {
        let c = ModelConfig::variant("11M").unwrap();
        assert_eq!(c.dims(), vec![72, 96, 192, 336]);
        assert_eq!(c.depths, vec![2, 2, 12, 2]);
        let c = ModelConfig::variant("28M").unwrap();
        assert_eq!(c.dims(), vec![96, 144, 288, 432]);
        assert_eq!(c.depths, vec![2, 2, 15, 2]);
    }

    #[test]
    fn dims_override_must_match_heads() {
        let mut c = ModelConfig::variant("nano").unwrap();
        c.dims_override = Some(vec![8, 8, 8]);
        assert!(c.validate().is_ok());
        c.dims_override = Some(vec![8, 12, 8]);
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("stage3"), "{err}");
    }

    #[test]
    fn mbconv_zero_project_is_identity() {
        let mut rng = Rng::new(3);
        let block = MbConvBlock::<f64>::init(&mut rng, 8).unwrap();
        block
            .project
            .weight
            .set_data(vec![0.0; block.project.weight.numel()]);
        let x: Tensor<f64> = rng.normal(&[1, 8, 6, 6], 1.0);
        let y = block.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert_eq!(a, b); // zero branch + zero-init norm affine offset
        }
    }

    #[test]
    fn glu_zero_gate_branch_is_identity() {
        let mut rng = Rng::new(4);
        let glu = ConvGlu::<f64>::init(&mut rng, 6, 4).unwrap();
        glu.dwconv.weight.set_data(vec![0.0; glu.dwconv.weight.numel()]);
        // dwconv bias and fc2 bias are zero-initialized already
        let x: Tensor<f64> = rng.normal(&[1, 3, 3, 6], 1.0);
        let y = glu.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn glu_expansion_arithmetic() {
        let mut rng = Rng::new(5);
        let glu = ConvGlu::<f64>::init(&mut rng, 96, 5).unwrap();
        assert_eq!(glu.fc1.weight.shape(), vec![96, 480]);
        assert_eq!(glu.hidden, 240);
        assert_eq!(glu.fc2.weight.shape(), vec![240, 96]);
    }

    #[test]
    fn nano_builds_and_runs() {
        let config = ModelConfig::variant("nano").unwrap();
        let mut rng = Rng::new(42);
        let model: Model<f64> = build_model(&config, &mut rng).unwrap();
        let images: Tensor<f64> = rng.uniform(&[2, 3, 32, 32], 0.0, 1.0);
        let out = model.forward(&images).unwrap();
        assert_eq!(out.logits.shape(), vec![2, 4]);
        let g = out.coordinators.unwrap();
        assert_eq!(g.shape(), vec![2, 4, 8]); // K=4, stage-2 dim 8
        assert!(out.anchor.unwrap().total.item().is_finite());
    }
}
