//! The assembled two-branch classifier: compact convolutional vision branch,
//! single-layer transformer tactile branch over the 7-feature descriptor,
//! and a learnable softmax-weighted fusion of the two logit streams.

pub mod checkpoint;

use crate::features::FEATURE_DIM;
use crate::rng::rng_from;
use crate::tensor::tape::MhaParams;
use crate::tensor::{
    ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, TensorResult, ValueId,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NORM_EPS: f64 = 1e-5;

/// Forward-pass mode; training carries the dropout stream.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TactileBranchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub n_classes: usize,
}

impl TactileBranchConfig {
    pub fn new(n_classes: usize) -> Self {
        TactileBranchConfig {
            d_model: 64,
            heads: 4,
            d_ffn: 256,
            dropout: 0.1,
            head_hidden: 32,
            n_classes,
        }
    }

    pub fn validate(&self) -> TensorResult<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(TensorError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.n_classes < 2 {
            return Err(TensorError::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionBranchConfig {
    pub input_hw: usize,
    pub in_channels: usize,
    /// Downsampling stages; a 1x1 projection stage to `feature_dim` is
    /// appended automatically so the head always sees `feature_dim`.
    pub stages: Vec<ConvStage>,
    pub feature_dim: usize,
    pub projection_norm: bool,
    pub head_hidden: usize,
    pub dropout: f64,
    pub n_unfrozen_tensors: usize,
    pub n_classes: usize,
}

impl VisionBranchConfig {
    pub fn new(n_classes: usize) -> Self {
        VisionBranchConfig {
            input_hw: 224,
            in_channels: 3,
            stages: [16, 32, 64, 128]
                .iter()
                .map(|&c| ConvStage {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                    norm: true,
                })
                .collect(),
            feature_dim: 1280,
            projection_norm: true,
            head_hidden: 256,
            dropout: 0.1,
            n_unfrozen_tensors: 20,
            n_classes,
        }
    }

    /// All backbone stages including the appended projection.
    fn all_stages(&self) -> Vec<ConvStage> {
        let mut stages = self.stages.clone();
        stages.push(ConvStage {
            out_channels: self.feature_dim,
            kernel: 1,
            stride: 1,
            norm: self.projection_norm,
        });
        stages
    }

    pub fn validate(&self) -> TensorResult<()> {
        if self.stages.is_empty() {
            return Err(TensorError::Config("backbone needs at least one stage".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.n_classes < 2 {
            return Err(TensorError::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        let mut hw = self.input_hw;
        for (i, s) in self.all_stages().iter().enumerate() {
            if s.stride == 0 || s.kernel == 0 {
                return Err(TensorError::Config(format!(
                    "stage {i} has zero kernel or stride"
                )));
            }
            let pad = s.kernel / 2;
            if s.kernel > hw + 2 * pad {
                return Err(TensorError::Config(format!(
                    "stage {i} kernel {} exceeds spatial extent {hw}",
                    s.kernel
                )));
            }
            hw = (hw + 2 * pad - s.kernel) / s.stride + 1;
            if hw == 0 {
                return Err(TensorError::Config(format!(
                    "stage {i} reduces spatial extent to zero"
                )));
            }
        }
        Ok(())
    }
}

struct ConvStageParams {
    w: ParamId,
    b: ParamId,
    norm: Option<(ParamId, ParamId)>,
    stride: usize,
    pad: usize,
}

struct VisionBranch {
    stages: Vec<ConvStageParams>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl VisionBranch {
    /// Backbone parameter tensors in construction order; the freeze policy
    /// counts from the end of this list.
    fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.push(s.w);
            ids.push(s.b);
            if let Some((g, b)) = s.norm {
                ids.push(g);
                ids.push(b);
            }
        }
        ids
    }

    fn head_ids(&self) -> Vec<ParamId> {
        vec![self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
    }
}

struct MhaIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

struct TactileBranch {
    embed_w: ParamId,
    embed_b: ParamId,
    /// Fixed sinusoidal encoding for sequence position 0.
    pos_encoding: Vec<f64>,
    ln1_g: ParamId,
    ln1_b: ParamId,
    mha: MhaIds,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ffn1_w: ParamId,
    ffn1_b: ParamId,
    ffn2_w: ParamId,
    ffn2_b: ParamId,
    head_ln_g: ParamId,
    head_ln_b: ParamId,
    head1_w: ParamId,
    head1_b: ParamId,
    head2_w: ParamId,
    head2_b: ParamId,
}

impl TactileBranch {
    fn ids(&self) -> Vec<ParamId> {
        vec![
            self.embed_w,
            self.embed_b,
            self.ln1_g,
            self.ln1_b,
            self.mha.wq,
            self.mha.bq,
            self.mha.wk,
            self.mha.bk,
            self.mha.wv,
            self.mha.bv,
            self.mha.wo,
            self.mha.bo,
            self.ln2_g,
            self.ln2_b,
            self.ffn1_w,
            self.ffn1_b,
            self.ffn2_w,
            self.ffn2_b,
            self.head_ln_g,
            self.head_ln_b,
            self.head1_w,
            self.head1_b,
            self.head2_w,
            self.head2_b,
        ]
    }
}

/// Logit streams of one forward pass, still on the tape.
pub struct BranchLogits {
    pub vision: ValueId,
    pub tactile: ValueId,
    pub fused: ValueId,
}

/// Per-group scalar parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub vision_total: usize,
    pub vision_trainable: usize,
    pub tactile_total: usize,
    pub fusion_total: usize,
    pub grand_total: usize,
}

/// Result of applying the freeze policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeOutcome {
    pub requested: usize,
    pub applied: usize,
    pub backbone_tensors: usize,
    pub clamped: bool,
}

/// Standard sinusoidal encoding row for one position.
pub fn sinusoidal_position_encoding(pos: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; d_model];
    for (i, slot) in pe.iter_mut().enumerate() {
        let exponent = 2.0 * (i / 2) as f64 / d_model as f64;
        let angle = pos as f64 / 10000f64.powf(exponent);
        *slot = if i.is_multiple_of(2) { angle.sin() } else { angle.cos() };
    }
    pe
}

pub struct SurformerModel<S: Scalar> {
    pub store: ParamStore<S>,
    pub vision_cfg: VisionBranchConfig,
    pub tactile_cfg: TactileBranchConfig,
    vision: VisionBranch,
    tactile: TactileBranch,
    fusion_w: ParamId,
}

impl<S: Scalar> SurformerModel<S> {
    /// Build with uniform `±sqrt(1/fan_in)` weight init, zero biases, unit
    /// norm scales, and fusion logits at (0, 0) so both modalities start
    /// with equal weight.
    pub fn new(
        vision_cfg: VisionBranchConfig,
        tactile_cfg: TactileBranchConfig,
        seed: u64,
    ) -> TensorResult<Self> {
        vision_cfg.validate()?;
        tactile_cfg.validate()?;
        if vision_cfg.n_classes != tactile_cfg.n_classes {
            return Err(TensorError::Config(format!(
                "branch class counts disagree: vision {} vs tactile {}",
                vision_cfg.n_classes, tactile_cfg.n_classes
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, "model-init");

        let weight = |store: &mut ParamStore<S>,
                          rng: &mut ChaCha8Rng,
                          name: String,
                          shape: Vec<usize>,
                          fan_in: usize|
         -> TensorResult<ParamId> {
            let bound = (1.0 / fan_in as f64).sqrt();
            store.add(name, Tensor::rand_uniform(rng, shape, -bound, bound))
        };

        // vision backbone
        let mut stages = Vec::new();
        let mut c_in = vision_cfg.in_channels;
        for (i, s) in vision_cfg.all_stages().iter().enumerate() {
            let prefix = format!("vision.backbone.stage{i}");
            let fan_in = c_in * s.kernel * s.kernel;
            let w = weight(
                &mut store,
                &mut rng,
                format!("{prefix}.conv.weight"),
                vec![s.out_channels, c_in, s.kernel, s.kernel],
                fan_in,
            )?;
            let b = store.add(format!("{prefix}.conv.bias"), Tensor::zeros(vec![s.out_channels]))?;
            let norm = if s.norm {
                let g = store.add(
                    format!("{prefix}.norm.gamma"),
                    Tensor::full(vec![s.out_channels], S::one()),
                )?;
                let be = store.add(
                    format!("{prefix}.norm.beta"),
                    Tensor::zeros(vec![s.out_channels]),
                )?;
                Some((g, be))
            } else {
                None
            };
            stages.push(ConvStageParams {
                w,
                b,
                norm,
                stride: s.stride,
                pad: s.kernel / 2,
            });
            c_in = s.out_channels;
        }

        // vision head: Dropout → 1280→head_hidden → ReLU → Dropout → head_hidden→C
        let fc1_w = weight(
            &mut store,
            &mut rng,
            "vision.head.fc1.weight".into(),
            vec![vision_cfg.head_hidden, vision_cfg.feature_dim],
            vision_cfg.feature_dim,
        )?;
        let fc1_b = store.add("vision.head.fc1.bias", Tensor::zeros(vec![vision_cfg.head_hidden]))?;
        let fc2_w = weight(
            &mut store,
            &mut rng,
            "vision.head.fc2.weight".into(),
            vec![vision_cfg.n_classes, vision_cfg.head_hidden],
            vision_cfg.head_hidden,
        )?;
        let fc2_b = store.add("vision.head.fc2.bias", Tensor::zeros(vec![vision_cfg.n_classes]))?;
        let vision = VisionBranch {
            stages,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        };

        // tactile branch
        let d = tactile_cfg.d_model;
        let embed_w = weight(
            &mut store,
            &mut rng,
            "tactile.embed.weight".into(),
            vec![d, FEATURE_DIM],
            FEATURE_DIM,
        )?;
        let embed_b = store.add("tactile.embed.bias", Tensor::zeros(vec![d]))?;
        let ln1_g = store.add("tactile.encoder.ln1.gamma", Tensor::full(vec![d], S::one()))?;
        let ln1_b = store.add("tactile.encoder.ln1.beta", Tensor::zeros(vec![d]))?;
        let attn_weight = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str| {
            weight(store, rng, format!("tactile.encoder.mha.{name}.weight"), vec![d, d], d)
        };
        let wq = attn_weight(&mut store, &mut rng, "q")?;
        let bq = store.add("tactile.encoder.mha.q.bias", Tensor::zeros(vec![d]))?;
        let wk = attn_weight(&mut store, &mut rng, "k")?;
        let bk = store.add("tactile.encoder.mha.k.bias", Tensor::zeros(vec![d]))?;
        let wv = attn_weight(&mut store, &mut rng, "v")?;
        let bv = store.add("tactile.encoder.mha.v.bias", Tensor::zeros(vec![d]))?;
        let wo = attn_weight(&mut store, &mut rng, "o")?;
        let bo = store.add("tactile.encoder.mha.o.bias", Tensor::zeros(vec![d]))?;
        let ln2_g = store.add("tactile.encoder.ln2.gamma", Tensor::full(vec![d], S::one()))?;
        let ln2_b = store.add("tactile.encoder.ln2.beta", Tensor::zeros(vec![d]))?;
        let ffn1_w = weight(
            &mut store,
            &mut rng,
            "tactile.encoder.ffn.fc1.weight".into(),
            vec![tactile_cfg.d_ffn, d],
            d,
        )?;
        let ffn1_b = store.add(
            "tactile.encoder.ffn.fc1.bias",
            Tensor::zeros(vec![tactile_cfg.d_ffn]),
        )?;
        let ffn2_w = weight(
            &mut store,
            &mut rng,
            "tactile.encoder.ffn.fc2.weight".into(),
            vec![d, tactile_cfg.d_ffn],
            tactile_cfg.d_ffn,
        )?;
        let ffn2_b = store.add("tactile.encoder.ffn.fc2.bias", Tensor::zeros(vec![d]))?;
        let head_ln_g = store.add("tactile.head.ln.gamma", Tensor::full(vec![d], S::one()))?;
        let head_ln_b = store.add("tactile.head.ln.beta", Tensor::zeros(vec![d]))?;
        let head1_w = weight(
            &mut store,
            &mut rng,
            "tactile.head.fc1.weight".into(),
            vec![tactile_cfg.head_hidden, d],
            d,
        )?;
        let head1_b = store.add(
            "tactile.head.fc1.bias",
            Tensor::zeros(vec![tactile_cfg.head_hidden]),
        )?;
        let head2_w = weight(
            &mut store,
            &mut rng,
            "tactile.head.fc2.weight".into(),
            vec![tactile_cfg.n_classes, tactile_cfg.head_hidden],
            tactile_cfg.head_hidden,
        )?;
        let head2_b = store.add(
            "tactile.head.fc2.bias",
            Tensor::zeros(vec![tactile_cfg.n_classes]),
        )?;
        let tactile = TactileBranch {
            embed_w,
            embed_b,
            pos_encoding: sinusoidal_position_encoding(0, d),
            ln1_g,
            ln1_b,
            mha: MhaIds {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            },
            ln2_g,
            ln2_b,
            ffn1_w,
            ffn1_b,
            ffn2_w,
            ffn2_b,
            head_ln_g,
            head_ln_b,
            head1_w,
            head1_b,
            head2_w,
            head2_b,
        };

        let fusion_w = store.add("fusion.weights", Tensor::zeros(vec![2]))?;

        Ok(SurformerModel {
            store,
            vision_cfg,
            tactile_cfg,
            vision,
            tactile,
            fusion_w,
        })
    }

    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        self.vision.backbone_ids()
    }

    pub fn vision_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.vision.backbone_ids();
        ids.extend(self.vision.head_ids());
        ids
    }

    pub fn tactile_param_ids(&self) -> Vec<ParamId> {
        self.tactile.ids()
    }

    pub fn fusion_param_id(&self) -> ParamId {
        self.fusion_w
    }

    /// Current softmax-normalized fusion weights `(α_vision, α_tactile)`.
    pub fn alpha(&self) -> (f64, f64) {
        let w = self.store.get(self.fusion_w).tensor.data();
        let (a, b) = crate::tensor::tape::two_way_softmax(w[0].as_f64(), w[1].as_f64());
        (a, b)
    }

    fn apply_dropout(
        tape: &mut Tape<S>,
        x: ValueId,
        p: f64,
        mode: &mut Mode<'_>,
    ) -> TensorResult<ValueId> {
        match mode {
            Mode::Train(rng) => tape.dropout(x, p, true, rng),
            Mode::Eval => Ok(x),
        }
    }

    /// Backbone stages then global average pooling: `[B,3,H,W] → [B, feature_dim]`.
    pub fn vision_backbone_forward(
        &self,
        tape: &mut Tape<S>,
        images: &Tensor<S>,
    ) -> TensorResult<ValueId> {
        self.vision_backbone_forward_in(&self.store, tape, images)
    }

    pub fn vision_backbone_forward_in(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        images: &Tensor<S>,
    ) -> TensorResult<ValueId> {
        let want = [
            images.shape().first().copied().unwrap_or(0),
            self.vision_cfg.in_channels,
            self.vision_cfg.input_hw,
            self.vision_cfg.input_hw,
        ];
        if images.shape().len() != 4 || images.shape()[1..] != want[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "vision input",
                lhs: images.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut x = tape.leaf(images);
        for s in &self.vision.stages {
            let w = tape.param(store, s.w);
            let b = tape.param(store, s.b);
            x = tape.conv2d(x, w, b, s.stride, s.pad)?;
            if let Some((g, be)) = s.norm {
                let g = tape.param(store, g);
                let be = tape.param(store, be);
                x = tape.instance_norm2d(x, g, be, S::from_f64(NORM_EPS))?;
            }
            x = tape.relu(x);
        }
        tape.global_avg_pool(x)
    }

    /// Classifier head on pooled features: Dropout → linear → ReLU →
    /// Dropout → linear.
    pub fn vision_head_forward(
        &self,
        tape: &mut Tape<S>,
        features: ValueId,
        mode: &mut Mode<'_>,
    ) -> TensorResult<ValueId> {
        self.vision_head_forward_in(&self.store, tape, features, mode)
    }

    pub fn vision_head_forward_in(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        features: ValueId,
        mode: &mut Mode<'_>,
    ) -> TensorResult<ValueId> {
        let p = self.vision_cfg.dropout;
        let h = Self::apply_dropout(tape, features, p, mode)?;
        let fc1_w = tape.param(store, self.vision.fc1_w);
        let fc1_b = tape.param(store, self.vision.fc1_b);
        let h = tape.linear(h, fc1_w, fc1_b)?;
        let h = tape.relu(h);
        let h = Self::apply_dropout(tape, h, p, mode)?;
        let fc2_w = tape.param(store, self.vision.fc2_w);
        let fc2_b = tape.param(store, self.vision.fc2_b);
        tape.linear(h, fc2_w, fc2_b)
    }

    pub fn vision_forward(
        &self,
        tape: &mut Tape<S>,
        images: &Tensor<S>,
        mode: &mut Mode<'_>,
    ) -> TensorResult<ValueId> {
        self.vision_forward_in(&self.store, tape, images, mode)
    }

    pub fn vision_forward_in(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        images: &Tensor<S>,
        mode: &mut Mode<'_>,
    ) -> TensorResult<ValueId> {
        let feat = self.vision_backbone_forward_in(store, tape, images)?;
        self.vision_head_forward_in(store, tape, feat, mode)
    }

    /// Tactile branch over normalized feature batches `[B, 7]`: embed to
    /// d_model, add the position-0 sinusoidal encoding, one pre-norm encoder
    /// layer, then LayerNorm → Dropout → linear → ReLU → linear.
    pub fn tactile_forward(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
        mode: &mut Mode<'_>,
    ) -> TensorResult<ValueId> {
        self.tactile_forward_in(&self.store, tape, features, mode)
    }

    pub fn tactile_forward_in(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
        mode: &mut Mode<'_>,
    ) -> TensorResult<ValueId> {
        if features.shape().len() != 2 || features.shape()[1] != FEATURE_DIM {
            return Err(TensorError::ShapeMismatch {
                op: "tactile input",
                lhs: features.shape().to_vec(),
                rhs: vec![features.shape().first().copied().unwrap_or(0), FEATURE_DIM],
            });
        }
        let batch = features.shape()[0];
        let d = self.tactile_cfg.d_model;
        let t = &self.tactile;

        let x = tape.leaf(features);
        let ew = tape.param(store, t.embed_w);
        let eb = tape.param(store, t.embed_b);
        let x = tape.linear(x, ew, eb)?;
        let x = tape.reshape(x, vec![batch, 1, d])?;
        let pe = tape.constant(Tensor::from_f64_slice(vec![d], &t.pos_encoding)?);
        let mut x = tape.add_row(x, pe)?;

        // pre-norm encoder layer: x + MHA(LN(x)), then x + FFN(LN(x))
        let g1 = tape.param(store, t.ln1_g);
        let b1 = tape.param(store, t.ln1_b);
        let h = tape.layer_norm(x, g1, b1, S::from_f64(NORM_EPS))?;
        let mha = MhaParams {
            wq: tape.param(store, t.mha.wq),
            bq: tape.param(store, t.mha.bq),
            wk: tape.param(store, t.mha.wk),
            bk: tape.param(store, t.mha.bk),
            wv: tape.param(store, t.mha.wv),
            bv: tape.param(store, t.mha.bv),
            wo: tape.param(store, t.mha.wo),
            bo: tape.param(store, t.mha.bo),
        };
        let attn = tape.multi_head_attention(h, &mha, self.tactile_cfg.heads)?;
        x = tape.add(x, attn)?;

        let g2 = tape.param(store, t.ln2_g);
        let b2 = tape.param(store, t.ln2_b);
        let h = tape.layer_norm(x, g2, b2, S::from_f64(NORM_EPS))?;
        let f1w = tape.param(store, t.ffn1_w);
        let f1b = tape.param(store, t.ffn1_b);
        let f = tape.linear(h, f1w, f1b)?;
        let f = tape.relu(f);
        let f2w = tape.param(store, t.ffn2_w);
        let f2b = tape.param(store, t.ffn2_b);
        let f = tape.linear(f, f2w, f2b)?;
        x = tape.add(x, f)?;

        // classifier head
        let x = tape.reshape(x, vec![batch, d])?;
        let hg = tape.param(store, t.head_ln_g);
        let hb = tape.param(store, t.head_ln_b);
        let x = tape.layer_norm(x, hg, hb, S::from_f64(NORM_EPS))?;
        let x = Self::apply_dropout(tape, x, self.tactile_cfg.dropout, mode)?;
        let h1w = tape.param(store, t.head1_w);
        let h1b = tape.param(store, t.head1_b);
        let x = tape.linear(x, h1w, h1b)?;
        let x = tape.relu(x);
        let h2w = tape.param(store, t.head2_w);
        let h2b = tape.param(store, t.head2_b);
        tape.linear(x, h2w, h2b)
    }

    /// Softmax-weighted convex combination of the two logit streams.
    pub fn fuse(&self, tape: &mut Tape<S>, zv: ValueId, zt: ValueId) -> TensorResult<ValueId> {
        self.fuse_in(&self.store, tape, zv, zt)
    }

    pub fn fuse_in(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        zv: ValueId,
        zt: ValueId,
    ) -> TensorResult<ValueId> {
        let w = tape.param(store, self.fusion_w);
        tape.weighted_fuse(zv, zt, w)
    }

    /// Full forward pass: vision branch, tactile branch, fusion.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        images: &Tensor<S>,
        tactile_features: &Tensor<S>,
        mode: &mut Mode<'_>,
    ) -> TensorResult<BranchLogits> {
        self.forward_in(&self.store, tape, images, tactile_features, mode)
    }

    /// Forward against an external parameter store (finite-difference
    /// checks perturb the store between evaluations).
    pub fn forward_in(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        images: &Tensor<S>,
        tactile_features: &Tensor<S>,
        mode: &mut Mode<'_>,
    ) -> TensorResult<BranchLogits> {
        let vision = self.vision_forward_in(store, tape, images, mode)?;
        let tactile = self.tactile_forward_in(store, tape, tactile_features, mode)?;
        let fused = self.fuse_in(store, tape, vision, tactile)?;
        Ok(BranchLogits {
            vision,
            tactile,
            fused,
        })
    }

    /// Freeze all backbone tensors except the last `n_unfrozen` in
    /// construction order; head and fusion stay trainable. Requests beyond
    /// the backbone size clamp with a flag.
    pub fn apply_freeze_policy(&mut self, n_unfrozen: usize) -> FreezeOutcome {
        let backbone = self.vision.backbone_ids();
        let total = backbone.len();
        let applied = n_unfrozen.min(total);
        let cut = total - applied;
        for (i, id) in backbone.iter().enumerate() {
            self.store.get_mut(*id).trainable = i >= cut;
        }
        for id in self.vision.head_ids() {
            self.store.get_mut(id).trainable = true;
        }
        for id in self.tactile.ids() {
            self.store.get_mut(id).trainable = true;
        }
        self.store.get_mut(self.fusion_w).trainable = true;
        FreezeOutcome {
            requested: n_unfrozen,
            applied,
            backbone_tensors: total,
            clamped: n_unfrozen > total,
        }
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let sum = |ids: &[ParamId]| -> usize {
            ids.iter().map(|&id| self.store.get(id).tensor.numel()).sum()
        };
        let trainable_sum = |ids: &[ParamId]| -> usize {
            ids.iter()
                .filter(|&&id| self.store.get(id).trainable)
                .map(|&id| self.store.get(id).tensor.numel())
                .sum()
        };
        let vision_ids = self.vision_param_ids();
        let tactile_ids = self.tactile_param_ids();
        let vision_total = sum(&vision_ids);
        let tactile_total = sum(&tactile_ids);
        let fusion_total = self.store.get(self.fusion_w).tensor.numel();
        ParamCounts {
            vision_total,
            vision_trainable: trainable_sum(&vision_ids),
            tactile_total,
            fusion_total,
            grand_total: vision_total + tactile_total + fusion_total,
        }
    }
}

/// Probabilities, argmax class (ties to the lowest index), and confidence
/// per row of a logit batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S: Scalar> {
    pub probabilities: Tensor<S>,
    pub classes: Vec<usize>,
    pub confidence: Vec<S>,
}

pub fn predict<S: Scalar>(fused_logits: &Tensor<S>) -> TensorResult<Prediction<S>> {
    if !fused_logits.is_finite() {
        return Err(TensorError::Numeric(
            "prediction requires finite logits".into(),
        ));
    }
    let (rows, cols) = fused_logits.rows_cols();
    let mut probs = fused_logits.clone();
    probs.requires_grad = false;
    probs.grad = None;
    let mut classes = Vec::with_capacity(rows);
    let mut confidence = Vec::with_capacity(rows);
    for row in probs.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let mut best = (S::neg_infinity(), 0usize);
        for (j, v) in row.iter_mut().enumerate() {
            *v /= sum;
            if *v > best.0 {
                best = (*v, j);
            }
        }
        classes.push(best.1);
        confidence.push(best.0);
    }
    Ok(Prediction {
        probabilities: probs,
        classes,
        confidence,
    })
}

/// Small configuration pair for 64-bit gradient checking and fast tests.
pub fn tiny_configs(n_classes: usize) -> (VisionBranchConfig, TactileBranchConfig) {
    let vision = VisionBranchConfig {
        input_hw: 8,
        in_channels: 3,
        stages: vec![ConvStage {
            out_channels: 4,
            kernel: 3,
            stride: 2,
            norm: true,
        }],
        feature_dim: 8,
        projection_norm: true,
        head_hidden: 4,
        dropout: 0.1,
        n_unfrozen_tensors: 20,
        n_classes,
    };
    let tactile = TactileBranchConfig {
        d_model: 8,
        heads: 2,
        d_ffn: 32,
        dropout: 0.1,
        head_hidden: 4,
        n_classes,
    };
    (vision, tactile)
}

/// Finite-difference check of every parameter gradient through the full
/// two-branch forward plus the composite loss, on a tiny 64-bit model.
/// Returns the worst relative error across trials.
pub fn composed_model_gradcheck(seed: u64, trials: usize) -> TensorResult<f64> {
    use crate::tensor::gradcheck::{check_params, FdConfig};

    let mut worst = 0.0f64;
    for trial in 0..trials as u64 {
        let (vcfg, tcfg) = tiny_configs(3);
        let aux = 0.3;
        let mut model = SurformerModel::<f64>::new(vcfg, tcfg, seed ^ trial)?;
        let mut rng = crate::rng::rng_from_indexed(seed, "composed-gradcheck", trial);
        let images = Tensor::<f64>::rand_uniform(&mut rng, vec![2, 3, 8, 8], -1.0, 1.0);
        let feats = Tensor::<f64>::rand_uniform(&mut rng, vec![2, FEATURE_DIM], -1.0, 1.0);
        let targets = vec![0usize, 2usize];

        let mut store = std::mem::take(&mut model.store);
        let build = |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> TensorResult<ValueId> {
            let logits = model.forward_in(store, tape, &images, &feats, &mut Mode::Eval)?;
            let main = tape.cross_entropy(logits.fused, &targets)?;
            let aux_v = tape.cross_entropy(logits.vision, &targets)?;
            let aux_t = tape.cross_entropy(logits.tactile, &targets)?;
            let sv = tape.scale(aux_v, aux);
            let st = tape.scale(aux_t, aux);
            let partial = tape.add(main, sv)?;
            tape.add(partial, st)
        };
        let report = check_params(&mut store, build, FdConfig::default())?;
        model.store = store;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}
