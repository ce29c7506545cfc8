//! The two-stream sequence classifier.
//!
//! A clip of `T` frames is turned into two per-frame embedding sequences: an
//! appearance sequence from a convolutional trunk, and a relation sequence
//! obtained by pooling the feature map into a `P x P` patch grid and running
//! masked graph attention over a fixed patch relation graph. The sequences
//! are stacked into a `2T`-node parallel graph whose edges are limited to a
//! temporal response scope, fused by graph attention, pooled over time, and
//! classified by a small MLP. Ablation variants drop or rewire individual
//! stages; each variant only instantiates the parameters it actually uses.

mod checkpoint;

pub use checkpoint::CheckpointError;

use crate::attention::{
    add_positional_encoding, gat_forward, Activation, AttentionRecord, GatHead, GatLayerParams,
};
use crate::graphs::{
    build_fusion_graph, build_relation_graph, AdjacencyMatrix, GraphError, GridSpec,
};
use crate::numerics::{Scalar, Tape, Tensor, TensorError};
use crate::training::{constant_param, kaiming_init, zeros_param};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the relation feature maps accepted in precomputed feature
/// mode. Archives store relation maps at this fixed resolution.
pub const EXTERNAL_MAP_SIDE: usize = 12;

/// Output channels of the three stride-2 convolution blocks in the toy trunk.
pub const TRUNK_CHANNELS: [usize; 3] = [8, 16, 24];

/// Initial value of every learned rectifier slope.
const PRELU_INIT: f64 = 0.25;

/// Negative slope used both for raw attention scores and for the attention
/// output activation.
const GAT_NEGATIVE_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {}", violations.join("; "))]
    Config { violations: Vec<String> },
    #[error("invalid model input: {reason}")]
    Input { reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Source of per-frame features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    /// Three stride-2 convolution blocks applied to raw frames.
    Toy,
    /// Precomputed features: the appearance stream is consumed as-is, and
    /// the relation stream is either pooled feature maps with this many
    /// channels (at [`EXTERNAL_MAP_SIDE`] resolution) or, when `None`,
    /// ready-made per-frame vectors that bypass the relation graph.
    ExternalFeatures {
        #[serde(default)]
        relation_map_channels: Option<usize>,
    },
}

/// Ablation variant: which streams exist and how they are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AppearanceOnly,
    RelationOnly,
    ConcatBaseline,
    /// Both streams fused over a complete parallel graph (every frame pair).
    FusionNoTrs,
    /// Both streams fused over the scope-limited parallel graph.
    FusionTrs,
}

impl Variant {
    /// Every variant, in the order ablation reports list them.
    pub fn all() -> [Variant; 5] {
        [
            Variant::AppearanceOnly,
            Variant::RelationOnly,
            Variant::ConcatBaseline,
            Variant::FusionNoTrs,
            Variant::FusionTrs,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::AppearanceOnly => "appearance_only",
            Variant::RelationOnly => "relation_only",
            Variant::ConcatBaseline => "concat_baseline",
            Variant::FusionNoTrs => "fusion_no_trs",
            Variant::FusionTrs => "fusion_trs",
        }
    }

    pub fn uses_appearance(self) -> bool {
        !matches!(self, Variant::RelationOnly)
    }

    pub fn uses_relation(self) -> bool {
        !matches!(self, Variant::AppearanceOnly)
    }

    pub fn uses_fusion(self) -> bool {
        matches!(self, Variant::FusionNoTrs | Variant::FusionTrs)
    }

    /// Width multiplier of the classifier input: two-stream variants feed the
    /// classifier frame-wise concatenated features.
    pub fn classifier_width_multiplier(self) -> usize {
        match self {
            Variant::AppearanceOnly | Variant::RelationOnly => 1,
            _ => 2,
        }
    }
}

/// Full architecture description. Serialized into checkpoints and run
/// configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArpgNetConfig {
    /// Frames per clip after sampling.
    pub t: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Embedding width of both streams.
    pub c_prime: usize,
    /// Patch grid side; the relation graph has `p * p` nodes.
    pub p: usize,
    /// Temporal response scope: fusion edges connect frames at most this far
    /// apart.
    pub trs: usize,
    pub heads: usize,
    pub relation_gat_layers: usize,
    /// Zero is allowed and turns the fusion stage into an identity, which is
    /// useful for isolating the effect of attention itself.
    pub fusion_gat_layers: usize,
    pub n_classes: usize,
    /// Dropout rate of the classifier hidden layer, applied in training mode
    /// only.
    pub dropout: f64,
    /// Whether sinusoidal positional encoding is added to both sequences
    /// before fusion.
    pub positional_encoding: bool,
    pub backbone: Backbone,
    pub variant: Variant,
}

impl Default for ArpgNetConfig {
    fn default() -> Self {
        ArpgNetConfig {
            t: 16,
            input_channels: 3,
            input_height: 96,
            input_width: 96,
            c_prime: 64,
            p: 6,
            trs: 3,
            heads: 4,
            relation_gat_layers: 3,
            fusion_gat_layers: 1,
            n_classes: 7,
            dropout: 0.25,
            positional_encoding: true,
            backbone: Backbone::Toy,
            variant: Variant::FusionTrs,
        }
    }
}

/// Spatial extent after one stride-2, pad-1, 3x3 convolution.
fn conv_side(x: usize) -> usize {
    (x + 2 - 3) / 2 + 1
}

/// Spatial extent after the full three-block trunk.
fn trunk_side(x: usize) -> usize {
    conv_side(conv_side(conv_side(x)))
}

impl ArpgNetConfig {
    /// The scope actually used to build the fusion graph: the no-scope
    /// variant fuses over the complete parallel graph.
    pub fn effective_trs(&self) -> usize {
        match self.variant {
            Variant::FusionNoTrs => self.t.saturating_sub(1),
            _ => self.trs,
        }
    }

    /// Height and width of the map the relation branch pools into patches,
    /// when the active backbone produces one.
    pub fn relation_map_sides(&self) -> Option<(usize, usize)> {
        match self.backbone {
            Backbone::Toy => Some((
                trunk_side(self.input_height),
                trunk_side(self.input_width),
            )),
            Backbone::ExternalFeatures {
                relation_map_channels: Some(_),
            } => Some((EXTERNAL_MAP_SIDE, EXTERNAL_MAP_SIDE)),
            Backbone::ExternalFeatures {
                relation_map_channels: None,
            } => None,
        }
    }

    /// Channels of the map entering the relation branch, if any.
    pub fn relation_map_channels(&self) -> Option<usize> {
        match self.backbone {
            Backbone::Toy => Some(TRUNK_CHANNELS[2]),
            Backbone::ExternalFeatures {
                relation_map_channels,
            } => relation_map_channels,
        }
    }

    /// Whether the relation branch runs graph attention over patches (as
    /// opposed to being bypassed by precomputed per-frame vectors).
    pub fn relation_uses_gat(&self) -> bool {
        self.variant.uses_relation() && self.relation_map_sides().is_some()
    }

    /// Checks every structural constraint and reports all violations at
    /// once.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut violations = Vec::new();
        if self.t == 0 {
            violations.push("t must be at least 1".to_string());
        }
        if self.n_classes < 2 {
            violations.push(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if self.heads == 0 {
            violations.push("heads must be at least 1".to_string());
        }
        if self.c_prime == 0 || self.c_prime % 2 != 0 {
            violations.push(format!(
                "c_prime must be a positive even number, got {}",
                self.c_prime
            ));
        }
        if self.p == 0 {
            violations.push("p must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            violations.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.t > 0 && self.trs > self.t - 1 {
            violations.push(format!(
                "trs must not exceed t - 1 ({}), got {}",
                self.t - 1,
                self.trs
            ));
        }
        if let Backbone::Toy = self.backbone {
            if self.input_channels == 0 {
                violations.push("input_channels must be at least 1".to_string());
            }
            if self.input_height == 0 || self.input_width == 0 {
                violations.push(format!(
                    "input extent must be positive, got {}x{}",
                    self.input_height, self.input_width
                ));
            }
        }
        if let Backbone::ExternalFeatures {
            relation_map_channels: Some(0),
        } = self.backbone
        {
            violations.push("relation_map_channels must be at least 1".to_string());
        }
        if self.variant.uses_relation() {
            if let Some((mh, mw)) = self.relation_map_sides() {
                if self.p > mh.min(mw) && self.p > 0 {
                    violations.push(format!(
                        "p = {} exceeds the {}x{} relation feature map",
                        self.p, mh, mw
                    ));
                }
                if self.relation_gat_layers == 0 {
                    violations.push(
                        "relation_gat_layers must be at least 1 when the relation branch runs \
                         graph attention"
                            .to_string(),
                    );
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config { violations })
        }
    }
}

/// Relation-stream payload in precomputed feature mode.
#[derive(Clone)]
pub enum RelationFeatures<T: Scalar> {
    /// Per-frame feature maps, shape `[t, channels, side, side]`.
    Maps(Tensor<T>),
    /// Per-frame vectors that bypass the relation graph, shape `[t, c_prime]`.
    Sequence(Tensor<T>),
}

/// One clip presented to the model.
#[derive(Clone)]
pub enum ModelInput<T: Scalar> {
    /// Raw frames, shape `[t, channels, height, width]`; both trunks consume
    /// them.
    Frames(Tensor<T>),
    /// Precomputed per-stream features. A stream the active variant does not
    /// use may be omitted.
    Features {
        appearance: Option<Tensor<T>>,
        relation: Option<RelationFeatures<T>>,
    },
}

/// Whether a forward pass applies dropout.
pub enum Mode<'r> {
    Eval,
    Train { dropout_rng: &'r mut dyn RngCore },
}

/// Every attention coefficient produced by one forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    /// Indexed `[frame][layer][record]`; empty when the relation branch is
    /// absent or bypassed.
    pub relation: Vec<Vec<Vec<AttentionRecord>>>,
    /// Indexed `[layer][record]`; empty for unfused variants.
    pub fusion: Vec<Vec<AttentionRecord>>,
}

struct ConvBlock<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
    slope: Tensor<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new<R: Rng + ?Sized>(
        tape: &Tape<T>,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(ConvBlock {
            w: kaiming_init(tape, &[c_out, c_in, 3, 3], c_in * 9, rng)?,
            b: zeros_param(tape, &[c_out])?,
            slope: constant_param(tape, &[1], T::from_f64(PRELU_INIT))?,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        x.conv2d(&self.w, &self.b, 2, 1)?.prelu(&self.slope)
    }
}

struct Trunk<T: Scalar> {
    blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> Trunk<T> {
    fn new<R: Rng + ?Sized>(
        tape: &Tape<T>,
        c_in: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let mut blocks = Vec::with_capacity(3);
        let mut c = c_in;
        for c_out in TRUNK_CHANNELS {
            blocks.push(ConvBlock::new(tape, c, c_out, rng)?);
            c = c_out;
        }
        Ok(Trunk { blocks })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut y = x.clone();
        for block in &self.blocks {
            y = block.forward(&y)?;
        }
        Ok(y)
    }
}

struct LinearPair<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> LinearPair<T> {
    fn new<R: Rng + ?Sized>(
        tape: &Tape<T>,
        d_out: usize,
        d_in: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(LinearPair {
            w: kaiming_init(tape, &[d_out, d_in], d_in, rng)?,
            b: zeros_param(tape, &[d_out])?,
        })
    }
}

struct Classifier<T: Scalar> {
    hidden: LinearPair<T>,
    slope: Tensor<T>,
    out: LinearPair<T>,
}

fn new_gat_layer<T: Scalar, R: Rng + ?Sized>(
    tape: &Tape<T>,
    h_in: usize,
    h_out: usize,
    heads: usize,
    rng: &mut R,
) -> Result<GatLayerParams<T>, TensorError> {
    let mut head_params = Vec::with_capacity(heads);
    for _ in 0..heads {
        head_params.push(GatHead {
            w: kaiming_init(tape, &[h_out, h_in], h_in, rng)?,
            att: kaiming_init(tape, &[2 * h_out], 2 * h_out, rng)?,
        });
    }
    GatLayerParams::new(
        head_params,
        GAT_NEGATIVE_SLOPE,
        Activation::LeakyRelu(GAT_NEGATIVE_SLOPE),
    )
}

/// The assembled model. Parameters live on the supplied tape so losses built
/// on the same tape backpropagate into them.
pub struct ArpgNet<T: Scalar> {
    config: ArpgNetConfig,
    tape: Tape<T>,
    relation_adj: Option<AdjacencyMatrix>,
    fusion_adj: Option<AdjacencyMatrix>,
    appearance_trunk: Option<Trunk<T>>,
    appearance_head: Option<LinearPair<T>>,
    relation_trunk: Option<Trunk<T>>,
    relation_gat: Vec<GatLayerParams<T>>,
    fusion_gat: Vec<GatLayerParams<T>>,
    classifier: Classifier<T>,
}

impl<T: Scalar> std::fmt::Debug for ArpgNet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n_params: usize = self.named_params().iter().map(|(_, p)| p.numel()).sum();
        f.debug_struct("ArpgNet")
            .field("config", &self.config)
            .field("n_params", &n_params)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> ArpgNet<T> {
    /// Builds a model with freshly initialized parameters. Only the
    /// components the configured variant uses are instantiated, so absent
    /// streams have no parameters at all.
    pub fn new<R: Rng + ?Sized>(
        config: ArpgNetConfig,
        tape: &Tape<T>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let toy = matches!(config.backbone, Backbone::Toy);
        let uses_app = config.variant.uses_appearance();
        let uses_rel = config.variant.uses_relation();

        let mut appearance_trunk = None;
        let mut appearance_head = None;
        if uses_app && toy {
            appearance_trunk = Some(Trunk::new(tape, config.input_channels, rng)?);
            let d_app = TRUNK_CHANNELS[2]
                * trunk_side(config.input_height)
                * trunk_side(config.input_width);
            appearance_head = Some(LinearPair::new(tape, config.c_prime, d_app, rng)?);
        }

        let mut relation_trunk = None;
        if uses_rel && toy {
            relation_trunk = Some(Trunk::new(tape, config.input_channels, rng)?);
        }

        let mut relation_gat = Vec::new();
        if config.relation_uses_gat() {
            let c_map = config
                .relation_map_channels()
                .expect("a relation map implies a channel count");
            for layer in 0..config.relation_gat_layers {
                let h_in = if layer == 0 { c_map } else { config.c_prime };
                relation_gat.push(new_gat_layer(
                    tape,
                    h_in,
                    config.c_prime,
                    config.heads,
                    rng,
                )?);
            }
        }

        let mut fusion_gat = Vec::new();
        if config.variant.uses_fusion() {
            for _ in 0..config.fusion_gat_layers {
                fusion_gat.push(new_gat_layer(
                    tape,
                    config.c_prime,
                    config.c_prime,
                    config.heads,
                    rng,
                )?);
            }
        }

        let d_cls = config.c_prime * config.variant.classifier_width_multiplier();
        let classifier = Classifier {
            hidden: LinearPair::new(tape, config.c_prime, d_cls, rng)?,
            slope: constant_param(tape, &[1], T::from_f64(PRELU_INIT))?,
            out: LinearPair::new(tape, config.n_classes, config.c_prime, rng)?,
        };

        let relation_adj = if config.relation_uses_gat() {
            let grid = GridSpec::new(config.p)?;
            Some(build_relation_graph(&grid))
        } else {
            None
        };
        let fusion_adj = if config.variant.uses_fusion() {
            Some(build_fusion_graph(config.t, config.effective_trs())?)
        } else {
            None
        };

        Ok(ArpgNet {
            config,
            tape: tape.clone(),
            relation_adj,
            fusion_adj,
            appearance_trunk,
            appearance_head,
            relation_trunk,
            relation_gat,
            fusion_gat,
            classifier,
        })
    }

    pub fn config(&self) -> &ArpgNetConfig {
        &self.config
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// The patch relation adjacency, when the relation branch runs attention.
    pub fn relation_adjacency(&self) -> Option<&AdjacencyMatrix> {
        self.relation_adj.as_ref()
    }

    /// The parallel fusion adjacency, for fused variants.
    pub fn fusion_adjacency(&self) -> Option<&AdjacencyMatrix> {
        self.fusion_adj.as_ref()
    }

    /// Every learned parameter with its canonical name, in a fixed order.
    /// The order defines the checkpoint layout and the optimizer state
    /// layout.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let push_trunk = |out: &mut Vec<(String, Tensor<T>)>, name: &str, trunk: &Trunk<T>| {
            for (i, block) in trunk.blocks.iter().enumerate() {
                out.push((format!("{name}.block{i}.w"), block.w.clone()));
                out.push((format!("{name}.block{i}.b"), block.b.clone()));
                out.push((format!("{name}.block{i}.slope"), block.slope.clone()));
            }
        };
        if let Some(trunk) = &self.appearance_trunk {
            push_trunk(&mut out, "appearance_trunk", trunk);
        }
        if let Some(head) = &self.appearance_head {
            out.push(("appearance_head.w".to_string(), head.w.clone()));
            out.push(("appearance_head.b".to_string(), head.b.clone()));
        }
        if let Some(trunk) = &self.relation_trunk {
            push_trunk(&mut out, "relation_trunk", trunk);
        }
        for (stack, name) in [
            (&self.relation_gat, "relation_gat"),
            (&self.fusion_gat, "fusion_gat"),
        ] {
            for (i, layer) in stack.iter().enumerate() {
                for (k, head) in layer.heads.iter().enumerate() {
                    out.push((format!("{name}.layer{i}.head{k}.w"), head.w.clone()));
                    out.push((format!("{name}.layer{i}.head{k}.att"), head.att.clone()));
                }
            }
        }
        out.push(("classifier.hidden.w".to_string(), self.classifier.hidden.w.clone()));
        out.push(("classifier.hidden.b".to_string(), self.classifier.hidden.b.clone()));
        out.push(("classifier.slope".to_string(), self.classifier.slope.clone()));
        out.push(("classifier.out.w".to_string(), self.classifier.out.w.clone()));
        out.push(("classifier.out.b".to_string(), self.classifier.out.b.clone()));
        out
    }

    fn input_error(reason: impl Into<String>) -> ModelError {
        ModelError::Input {
            reason: reason.into(),
        }
    }

    fn expect_shape(
        &self,
        what: &str,
        tensor: &Tensor<T>,
        expected: &[usize],
    ) -> Result<(), ModelError> {
        if tensor.shape() != expected {
            return Err(Self::input_error(format!(
                "{what} must have shape {expected:?}, got {:?}",
                tensor.shape()
            )));
        }
        Ok(())
    }

    /// Slices frame `t` out of a `[t, ...]` tensor and reshapes it to the
    /// given per-frame shape.
    fn frame(
        &self,
        stacked: &Tensor<T>,
        t: usize,
        frame_shape: &[usize],
    ) -> Result<Tensor<T>, TensorError> {
        let per_frame: usize = frame_shape.iter().product();
        stacked
            .reshape(&[self.config.t, per_frame])?
            .slice_rows(t, 1)?
            .reshape(frame_shape)
    }

    /// Per-frame appearance embeddings, shape `[t, c_prime]`.
    fn appearance_sequence(&self, input: &ModelInput<T>) -> Result<Tensor<T>, ModelError> {
        let cfg = &self.config;
        match input {
            ModelInput::Frames(frames) => {
                let trunk = self
                    .appearance_trunk
                    .as_ref()
                    .ok_or_else(|| Self::input_error("this variant has no appearance trunk"))?;
                let head = self
                    .appearance_head
                    .as_ref()
                    .expect("a trunk is always paired with a head");
                let frame_shape = [cfg.input_channels, cfg.input_height, cfg.input_width];
                let mut rows = Vec::with_capacity(cfg.t);
                for t in 0..cfg.t {
                    let map = trunk.forward(&self.frame(frames, t, &frame_shape)?)?;
                    let d = map.numel();
                    rows.push(map.reshape(&[d])?);
                }
                let flat = Tensor::stack_rows(&rows)?;
                Ok(flat.linear(&head.w, Some(&head.b))?)
            }
            ModelInput::Features { appearance, .. } => {
                let seq = appearance.as_ref().ok_or_else(|| {
                    Self::input_error("the active variant needs appearance features")
                })?;
                self.expect_shape("appearance features", seq, &[cfg.t, cfg.c_prime])?;
                Ok(seq.clone())
            }
        }
    }

    /// Runs the relation attention stack over one frame's patch features.
    fn relation_nodes_to_embedding(
        &self,
        nodes: &Tensor<T>,
        trace: &mut Vec<Vec<AttentionRecord>>,
    ) -> Result<Tensor<T>, ModelError> {
        let adj = self
            .relation_adj
            .as_ref()
            .expect("relation attention implies a relation graph");
        let mut x = nodes.clone();
        for layer in &self.relation_gat {
            let (next, records) = gat_forward(&x, adj, layer)?;
            trace.push(records);
            x = next;
        }
        Ok(x.mean_axis(0)?)
    }

    /// Pools a `[channels, h, w]` map into patch node features and applies
    /// the attention stack, producing one `[c_prime]` embedding.
    fn relation_map_to_embedding(
        &self,
        map: &Tensor<T>,
        trace: &mut Vec<Vec<AttentionRecord>>,
    ) -> Result<Tensor<T>, ModelError> {
        let p = self.config.p;
        let channels = map.shape()[0];
        let pooled = map.adaptive_avg_pool(p)?;
        let nodes = pooled.reshape(&[channels, p * p])?.transpose2()?;
        self.relation_nodes_to_embedding(&nodes, trace)
    }

    /// Per-frame relation embeddings, shape `[t, c_prime]`, along with the
    /// attention records of every frame and layer.
    fn relation_sequence(
        &self,
        input: &ModelInput<T>,
    ) -> Result<(Tensor<T>, Vec<Vec<Vec<AttentionRecord>>>), ModelError> {
        let cfg = &self.config;
        let mut trace = Vec::new();
        match input {
            ModelInput::Frames(frames) => {
                let trunk = self
                    .relation_trunk
                    .as_ref()
                    .ok_or_else(|| Self::input_error("this variant has no relation trunk"))?;
                let frame_shape = [cfg.input_channels, cfg.input_height, cfg.input_width];
                let mut rows = Vec::with_capacity(cfg.t);
                for t in 0..cfg.t {
                    let map = trunk.forward(&self.frame(frames, t, &frame_shape)?)?;
                    let mut frame_trace = Vec::new();
                    rows.push(self.relation_map_to_embedding(&map, &mut frame_trace)?);
                    trace.push(frame_trace);
                }
                Ok((Tensor::stack_rows(&rows)?, trace))
            }
            ModelInput::Features { relation, .. } => match relation {
                Some(RelationFeatures::Maps(maps)) => {
                    let channels = cfg.relation_map_channels().ok_or_else(|| {
                        Self::input_error(
                            "relation maps supplied but the backbone expects vectors",
                        )
                    })?;
                    let side = EXTERNAL_MAP_SIDE;
                    self.expect_shape(
                        "relation feature maps",
                        maps,
                        &[cfg.t, channels, side, side],
                    )?;
                    let mut rows = Vec::with_capacity(cfg.t);
                    for t in 0..cfg.t {
                        let map = self.frame(maps, t, &[channels, side, side])?;
                        let mut frame_trace = Vec::new();
                        rows.push(self.relation_map_to_embedding(&map, &mut frame_trace)?);
                        trace.push(frame_trace);
                    }
                    Ok((Tensor::stack_rows(&rows)?, trace))
                }
                Some(RelationFeatures::Sequence(seq)) => {
                    self.expect_shape("relation features", seq, &[cfg.t, cfg.c_prime])?;
                    Ok((seq.clone(), trace))
                }
                None => Err(Self::input_error(
                    "the active variant needs relation features",
                )),
            },
        }
    }

    /// Fuses the two sequences over the parallel graph: positional encoding,
    /// a 2t-node stack, the fusion attention layers, and a frame-wise split
    /// and concatenation back to `[t, 2 * c_prime]`.
    fn fuse(
        &self,
        app_seq: &Tensor<T>,
        rel_seq: &Tensor<T>,
        trace: &mut Vec<Vec<AttentionRecord>>,
    ) -> Result<Tensor<T>, ModelError> {
        let t = self.config.t;
        let (app, rel) = if self.config.positional_encoding {
            (
                add_positional_encoding(app_seq)?,
                add_positional_encoding(rel_seq)?,
            )
        } else {
            (app_seq.clone(), rel_seq.clone())
        };
        let mut x = app.concat(&rel, 0)?;
        let adj = self
            .fusion_adj
            .as_ref()
            .expect("fused variants build the parallel graph up front");
        for layer in &self.fusion_gat {
            let (next, records) = gat_forward(&x, adj, layer)?;
            trace.push(records);
            x = next;
        }
        let app_out = x.slice_rows(0, t)?;
        let rel_out = x.slice_rows(t, t)?;
        Ok(app_out.concat(&rel_out, 1)?)
    }

    fn check_frames_input(&self, input: &ModelInput<T>) -> Result<(), ModelError> {
        let cfg = &self.config;
        match (input, &cfg.backbone) {
            (ModelInput::Frames(frames), Backbone::Toy) => self.expect_shape(
                "frames",
                frames,
                &[cfg.t, cfg.input_channels, cfg.input_height, cfg.input_width],
            ),
            (ModelInput::Frames(_), Backbone::ExternalFeatures { .. }) => Err(
                Self::input_error("this model consumes precomputed features, not frames"),
            ),
            (ModelInput::Features { .. }, Backbone::Toy) => Err(Self::input_error(
                "this model consumes raw frames, not precomputed features",
            )),
            (ModelInput::Features { .. }, Backbone::ExternalFeatures { .. }) => Ok(()),
        }
    }

    /// The per-frame sequence entering temporal pooling, shape `[t, width]`,
    /// plus all attention records. Width is `c_prime` for single-stream
    /// variants and `2 * c_prime` otherwise.
    pub(crate) fn variant_sequence(
        &self,
        input: &ModelInput<T>,
    ) -> Result<(Tensor<T>, AttentionTrace), ModelError> {
        self.check_frames_input(input)?;
        let mut trace = AttentionTrace::default();
        let seq = match self.config.variant {
            Variant::AppearanceOnly => self.appearance_sequence(input)?,
            Variant::RelationOnly => {
                let (seq, relation_trace) = self.relation_sequence(input)?;
                trace.relation = relation_trace;
                seq
            }
            Variant::ConcatBaseline => {
                let app = self.appearance_sequence(input)?;
                let (rel, relation_trace) = self.relation_sequence(input)?;
                trace.relation = relation_trace;
                app.concat(&rel, 1)?
            }
            Variant::FusionNoTrs | Variant::FusionTrs => {
                let app = self.appearance_sequence(input)?;
                let (rel, relation_trace) = self.relation_sequence(input)?;
                trace.relation = relation_trace;
                self.fuse(&app, &rel, &mut trace.fusion)?
            }
        };
        Ok((seq, trace))
    }

    /// Maps the pooled clip embedding to class logits.
    fn classify(&self, pooled: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>, ModelError> {
        let d = pooled.numel();
        let x = pooled.reshape(&[1, d])?;
        let h = x
            .linear(&self.classifier.hidden.w, Some(&self.classifier.hidden.b))?
            .prelu(&self.classifier.slope)?;
        let h = match mode {
            Mode::Train { dropout_rng } if self.config.dropout > 0.0 => {
                h.dropout(self.config.dropout, &mut **dropout_rng)?
            }
            _ => h,
        };
        let logits = h.linear(&self.classifier.out.w, Some(&self.classifier.out.b))?;
        Ok(logits.reshape(&[self.config.n_classes])?)
    }

    /// Full forward pass: class logits (shape `[n_classes]`) and the
    /// attention trace of the pass.
    pub fn forward(
        &self,
        input: &ModelInput<T>,
        mode: &mut Mode,
    ) -> Result<(Tensor<T>, AttentionTrace), ModelError> {
        let (seq, trace) = self.variant_sequence(input)?;
        let pooled = seq.mean_axis(0)?;
        let logits = self.classify(&pooled, mode)?;
        Ok((logits, trace))
    }
}
