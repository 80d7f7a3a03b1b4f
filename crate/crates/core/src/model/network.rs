//! The tri-modal planner: vision and state encoders, instruction fusion,
//! intent modulation, risk attention and the trajectory decoder.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AblationFlags, ModelConfig};
use super::input::ModelInput;
use super::layers::*;
use super::ModelError;
use crate::scenario::{CameraName, DrivingIntent, Trajectory, ViewGroup};

fn view_group_index(g: ViewGroup) -> usize {
    match g {
        ViewGroup::Front => 0,
        ViewGroup::Rear => 1,
        ViewGroup::SideLeft => 2,
        ViewGroup::SideRight => 3,
    }
}

fn row<F: Scalar>(v: &ArrayView1<F>) -> Array2<F> {
    v.to_owned().insert_axis(Axis(0))
}

fn flat<F: Scalar>(r: Array2<F>) -> Array1<F> {
    r.index_axis_move(Axis(0), 0)
}

fn check_width<F>(what: &str, v: &ArrayView1<F>, want: usize) -> Result<(), ModelError> {
    if v.len() != want {
        return Err(ModelError::Shape(format!("{what}: expected width {want}, got {}", v.len())));
    }
    Ok(())
}

/// Inclusive prefix sum over rows, scaled.
pub fn cumulative_waypoints<F: Scalar>(displacements: &ArrayView2<F>, scale: F) -> Array2<F> {
    let mut out = displacements.to_owned();
    for t in 1..out.nrows() {
        let prev = out.row(t - 1).to_owned();
        let mut cur = out.row_mut(t);
        cur += &prev;
    }
    out.mapv_inplace(|v| v * scale);
    out
}

/// Adjoint of [`cumulative_waypoints`].
fn cumulative_waypoints_backward<F: Scalar>(d_waypoints: &ArrayView2<F>, scale: F) -> Array2<F> {
    let mut out = d_waypoints.to_owned();
    for t in (0..out.nrows().saturating_sub(1)).rev() {
        let next = out.row(t + 1).to_owned();
        let mut cur = out.row_mut(t);
        cur += &next;
    }
    out.mapv_inplace(|v| v * scale);
    out
}

// ---------------------------------------------------------------- vision

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder<F> {
    pub patch_proj: Linear<F>,
    pub cls: Array2<F>,
    pub pos: Array2<F>,
    pub layers: Vec<EncoderLayer<F>>,
    pub norm: LayerNorm<F>,
    pub out_proj: Linear<F>,
    /// `[num_cameras, d_model]`
    pub camera_emb: Array2<F>,
    /// `[4, d_model]`, indexed front, rear, side-left, side-right.
    pub group_emb: Array2<F>,
}
impl_params!(VisionEncoder { patch_proj, cls, pos, layers, norm, out_proj, camera_emb, group_emb });

struct CameraCache<F> {
    patches: Array2<F>,
    layers: Vec<EncoderLayerCache<F>>,
    norm: LayerNormCache<F>,
    normed: Array2<F>,
}

/// Patch tokens of all cameras and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures<F> {
    /// `[N, d_model]`, cameras concatenated in fixed order.
    pub v_tokens: Array2<F>,
    pub v_global: Array1<F>,
}

impl<F: Scalar> VisionEncoder<F> {
    fn new(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        let p = c.patches_per_camera();
        VisionEncoder {
            patch_proj: Linear::new_projection(rng, c.patch_dim(), c.vit_dim, c.init_std),
            cls: trunc_normal(rng, 1, c.vit_dim, c.init_std),
            pos: trunc_normal(rng, p + 1, c.vit_dim, c.init_std),
            layers: (0..c.vit_layers)
                .map(|_| EncoderLayer::new(rng, c.vit_dim, c.vit_heads, c.mlp_ratio, c.ln_eps))
                .collect(),
            norm: LayerNorm::new(c.vit_dim, true, c.ln_eps),
            out_proj: Linear::new(rng, c.vit_dim, c.d_model),
            camera_emb: trunc_normal(rng, c.num_cameras, c.d_model, c.init_std),
            group_emb: trunc_normal(rng, 4, c.d_model, c.init_std),
        }
    }

    fn num_cameras(&self) -> usize {
        self.camera_emb.nrows()
    }

    fn forward(&self, patches: &[Array2<F>]) -> Result<(VisualFeatures<F>, Vec<CameraCache<F>>), ModelError> {
        if patches.len() != self.num_cameras() {
            return Err(ModelError::Shape(format!(
                "expected {} camera views, got {}",
                self.num_cameras(),
                patches.len()
            )));
        }
        let want = (self.pos.nrows() - 1, self.patch_proj.in_dim());
        let mut blocks = Vec::with_capacity(patches.len());
        let mut caches = Vec::with_capacity(patches.len());
        for (i, p) in patches.iter().enumerate() {
            if p.dim() != want {
                return Err(ModelError::Shape(format!(
                    "camera {i}: expected patch matrix {want:?}, got {:?}",
                    p.dim()
                )));
            }
            let x = self.patch_proj.forward(&p.view());
            let mut h = concatenate(Axis(0), &[self.cls.view(), x.view()]).expect("same width");
            h += &self.pos;
            let mut layer_caches = Vec::with_capacity(self.layers.len());
            for layer in &self.layers {
                let (y, c) = layer.forward(&h.view());
                layer_caches.push(c);
                h = y;
            }
            let (n, nc) = self.norm.forward(&h.view());
            let normed = n.slice(s![1.., ..]).to_owned();
            let mut tokens = self.out_proj.forward(&normed.view());
            tokens += &self.camera_emb.row(i);
            tokens += &self.group_emb.row(view_group_index(CameraName::ALL[i].group()));
            blocks.push(tokens);
            caches.push(CameraCache {
                patches: p.clone(),
                layers: layer_caches,
                norm: nc,
                normed,
            });
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let v_tokens = concatenate(Axis(0), &views).expect("same width");
        let v_global = flat(mean_rows(&v_tokens.view()));
        Ok((VisualFeatures { v_tokens, v_global }, caches))
    }

    /// `d_tokens` already includes the contribution through `v_global`.
    fn backward(&self, caches: &[CameraCache<F>], d_tokens: &ArrayView2<F>, g: &mut VisionEncoder<F>) {
        let p = self.pos.nrows() - 1;
        for (i, c) in caches.iter().enumerate() {
            let d = d_tokens.slice(s![i * p..(i + 1) * p, ..]);
            let dsum = d.sum_axis(Axis(0));
            let mut cam_row = g.camera_emb.row_mut(i);
            cam_row += &dsum;
            let mut grp_row = g.group_emb.row_mut(view_group_index(CameraName::ALL[i].group()));
            grp_row += &dsum;
            let dnormed = self.out_proj.backward(&c.normed.view(), &d, &mut g.out_proj);
            let mut dn = Array2::zeros((p + 1, dnormed.ncols()));
            dn.slice_mut(s![1.., ..]).assign(&dnormed);
            let mut dh = self.norm.backward(&c.norm, &dn.view(), &mut g.norm);
            for (k, layer) in self.layers.iter().enumerate().rev() {
                dh = layer.backward(&c.layers[k], &dh.view(), &mut g.layers[k]);
            }
            g.pos += &dh;
            g.cls += &dh.slice(s![0..1, ..]);
            self.patch_proj
                .backward_params(&c.patches.view(), &dh.slice(s![1.., ..]), &mut g.patch_proj);
        }
    }
}

// ---------------------------------------------------------------- state

#[derive(Debug, Clone, PartialEq)]
pub struct StateEncoder<F> {
    pub input: Linear<F>,
    /// `[16, d_model]` temporal position embedding.
    pub pos: Array2<F>,
    pub layers: Vec<EncoderLayer<F>>,
    pub norm: LayerNorm<F>,
    /// Fixed feature scaling, not learned.
    pub input_scale: Vec<F>,
}
impl_params!(StateEncoder { input, pos, layers, norm });

pub(crate) struct StateCache<F> {
    scaled: Array2<F>,
    layers: Vec<EncoderLayerCache<F>>,
    norm: LayerNormCache<F>,
}

impl<F: Scalar> StateEncoder<F> {
    fn new(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        StateEncoder {
            input: Linear::new(rng, 6, c.d_model),
            pos: trunc_normal(rng, c.h_hist, c.d_model, c.init_std),
            layers: (0..c.state_layers)
                .map(|_| EncoderLayer::new(rng, c.d_model, c.state_heads, c.mlp_ratio, c.ln_eps))
                .collect(),
            norm: LayerNorm::new(c.d_model, true, c.ln_eps),
            input_scale: c.state_input_scale.iter().map(|&v| cst(v)).collect(),
        }
    }

    /// Runs the encoder over `frames` (at most 16 rows) using the leading
    /// position embeddings, and mean-pools the outputs.
    pub(crate) fn forward_frames(&self, frames: &ArrayView2<F>) -> (Array1<F>, StateCache<F>) {
        let mut scaled = frames.to_owned();
        for mut r in scaled.rows_mut() {
            for (v, s) in r.iter_mut().zip(&self.input_scale) {
                *v *= *s;
            }
        }
        let mut h = self.input.forward(&scaled.view());
        h += &self.pos.slice(s![..frames.nrows(), ..]);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&h.view());
            layer_caches.push(c);
            h = y;
        }
        let (n, nc) = self.norm.forward(&h.view());
        (
            flat(mean_rows(&n.view())),
            StateCache {
                scaled,
                layers: layer_caches,
                norm: nc,
            },
        )
    }

    fn forward(&self, history: &ArrayView2<F>) -> Result<(Array1<F>, StateCache<F>), ModelError> {
        if history.dim() != (self.pos.nrows(), 6) {
            return Err(ModelError::Shape(format!(
                "state history must be [{}, 6], got {:?}",
                self.pos.nrows(),
                history.dim()
            )));
        }
        Ok(self.forward_frames(history))
    }

    fn backward(&self, c: &StateCache<F>, d_global: &ArrayView1<F>, g: &mut StateEncoder<F>) {
        let n = c.scaled.nrows();
        let inv = cst::<F>(1.0 / n as f64);
        let dn = Array2::from_shape_fn((n, d_global.len()), |(_, j)| d_global[j] * inv);
        let mut dh = self.norm.backward(&c.norm, &dn.view(), &mut g.norm);
        for (k, layer) in self.layers.iter().enumerate().rev() {
            dh = layer.backward(&c.layers[k], &dh.view(), &mut g.layers[k]);
        }
        let mut gp = g.pos.slice_mut(s![..n, ..]);
        gp += &dh;
        self.input.backward_params(&c.scaled.view(), &dh.view(), &mut g.input);
    }
}

// ---------------------------------------------------------------- scene fusion

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFusion<F> {
    pub text_proj: Linear<F>,
    pub attn: Attention<F>,
    pub mlp: Mlp<F>,
}
impl_params!(SceneFusion { text_proj, attn, mlp });

/// Intermediate values of scene fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFusionOutput<F> {
    pub scene_vec: Array1<F>,
    pub c_scene: Array1<F>,
    pub scene_context: Array1<F>,
}

struct SceneCache<F> {
    emb: Array2<F>,
    attn: AttentionCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Scalar> SceneFusion<F> {
    fn new(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        SceneFusion {
            text_proj: Linear::new_projection(rng, c.d_text, c.d_model, c.init_std),
            attn: Attention::new(rng, c.d_model, c.fusion_heads),
            mlp: Mlp::new(rng, 2 * c.d_model, c.hidden(c.d_model), c.d_model),
        }
    }

    fn forward(&self, vf: &VisualFeatures<F>, emb: &ArrayView1<F>) -> Result<(SceneFusionOutput<F>, SceneCache<F>), ModelError> {
        let d = self.text_proj.out_dim();
        check_width("scene embedding", emb, self.text_proj.in_dim())?;
        check_width("v_global", &vf.v_global.view(), d)?;
        if vf.v_tokens.ncols() != d || vf.v_tokens.nrows() == 0 {
            return Err(ModelError::Shape(format!("v_tokens must be [N>0, {d}], got {:?}", vf.v_tokens.dim())));
        }
        let emb = row(emb);
        let scene_vec = self.text_proj.forward(&emb.view());
        let (c_scene, ac) = self.attn.forward(&scene_vec.view(), &vf.v_tokens.view());
        let vg = row(&vf.v_global.view());
        let cat = hcat(&vg.view(), &c_scene.view());
        let (s_tilde, mc) = self.mlp.forward(&cat.view());
        let scene_context = vg + s_tilde;
        Ok((
            SceneFusionOutput {
                scene_vec: flat(scene_vec),
                c_scene: flat(c_scene),
                scene_context: flat(scene_context),
            },
            SceneCache { emb, attn: ac, mlp: mc },
        ))
    }

    /// Returns `(d_v_tokens, d_v_global)`.
    fn backward(&self, c: &SceneCache<F>, d_ctx: &ArrayView2<F>, g: &mut SceneFusion<F>) -> (Array2<F>, Array2<F>) {
        let d = d_ctx.ncols();
        let dcat = self.mlp.backward(&c.mlp, d_ctx, &mut g.mlp);
        let dvg = d_ctx + &dcat.slice(s![.., ..d]);
        let (dq, dtokens) = self.attn.backward(&c.attn, &dcat.slice(s![.., d..]), &mut g.attn);
        self.text_proj.backward_params(&c.emb.view(), &dq.view(), &mut g.text_proj);
        (dtokens, dvg)
    }
}

// ---------------------------------------------------------------- planning fusion

#[derive(Debug, Clone, PartialEq)]
pub struct PlanFusion<F> {
    pub mlp: Mlp<F>,
}
impl_params!(PlanFusion { mlp });

impl<F: Scalar> PlanFusion<F> {
    fn new(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        PlanFusion {
            mlp: Mlp::new(rng, 2 * c.d_model, c.hidden(c.d_model), c.d_model),
        }
    }

    fn forward(&self, a: &ArrayView1<F>, b: &ArrayView1<F>) -> Result<(Array1<F>, MlpCache<F>), ModelError> {
        let d = self.mlp.fc2.out_dim();
        check_width("scene_context", a, d)?;
        check_width("s_global", b, d)?;
        let cat = hcat(&row(a).view(), &row(b).view());
        let (y, c) = self.mlp.forward(&cat.view());
        Ok((flat(y), c))
    }

    fn backward(&self, c: &MlpCache<F>, dy: &ArrayView2<F>, g: &mut PlanFusion<F>) -> (Array2<F>, Array2<F>) {
        let d = dy.ncols();
        let dcat = self.mlp.backward(c, dy, &mut g.mlp);
        (dcat.slice(s![.., ..d]).to_owned(), dcat.slice(s![.., d..]).to_owned())
    }
}

// ---------------------------------------------------------------- intent modulation

#[derive(Debug, Clone, PartialEq)]
pub struct IntentModulator<F> {
    /// `[4, d_model]`, one row per [`DrivingIntent`].
    pub table: Array2<F>,
    /// Maps the intent embedding to `[scale || shift]`.
    pub mlp: Mlp<F>,
}
impl_params!(IntentModulator { table, mlp });

/// Scale logits and shift produced for one intent.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentModulation<F> {
    pub scale: Array1<F>,
    pub shift: Array1<F>,
}

struct IntentCache<F> {
    intent: usize,
    pc: Array2<F>,
    gate: Array2<F>,
    mlp: MlpCache<F>,
}

impl<F: Scalar> IntentModulator<F> {
    fn new(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        IntentModulator {
            table: trunc_normal(rng, DrivingIntent::ALL.len(), c.d_model, c.init_std),
            mlp: Mlp::new(rng, c.d_model, c.hidden(c.d_model), 2 * c.d_model),
        }
    }

    fn forward(
        &self,
        pc: &ArrayView1<F>,
        intent: DrivingIntent,
    ) -> Result<(Array1<F>, IntentModulation<F>, IntentCache<F>), ModelError> {
        let d = self.table.ncols();
        check_width("plan_context", pc, d)?;
        let idx = intent.index();
        let e = self.table.slice(s![idx..idx + 1, ..]);
        let (ss, mc) = self.mlp.forward(&e);
        let scale = ss.slice(s![.., ..d]).to_owned();
        let shift = ss.slice(s![.., d..]).to_owned();
        let gate = scale.mapv(sigmoid);
        let pc = row(pc);
        let out = &pc * &gate + &shift;
        Ok((
            flat(out),
            IntentModulation {
                scale: flat(scale),
                shift: flat(shift),
            },
            IntentCache {
                intent: idx,
                pc,
                gate,
                mlp: mc,
            },
        ))
    }

    /// Returns `d_plan_context`.
    fn backward(&self, c: &IntentCache<F>, dout: &ArrayView2<F>, g: &mut IntentModulator<F>) -> Array2<F> {
        let dpc = dout * &c.gate;
        let dscale = dout * &c.pc * &c.gate.mapv(|s| s * (F::one() - s));
        let dss = hcat(&dscale.view(), dout);
        let de = self.mlp.backward(&c.mlp, &dss.view(), &mut g.mlp);
        let mut r = g.table.row_mut(c.intent);
        r += &de.row(0);
        dpc
    }
}

// ---------------------------------------------------------------- risk attention

#[derive(Debug, Clone, PartialEq)]
pub struct RiskAttention<F> {
    pub text_proj: Linear<F>,
    pub attn: Attention<F>,
    pub norm: LayerNorm<F>,
}
impl_params!(RiskAttention { text_proj, attn, norm });

/// Intermediate values of risk attention.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskOutput<F> {
    pub risk_vec: Array1<F>,
    pub c_attn: Array1<F>,
    pub plan_context_ctrl: Array1<F>,
}

struct RiskCache<F> {
    emb: Array2<F>,
    alpha: F,
    attn: AttentionCache<F>,
    norm: LayerNormCache<F>,
}

impl<F: Scalar> RiskAttention<F> {
    fn new(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        RiskAttention {
            text_proj: Linear::new_projection(rng, c.d_text, c.d_model, c.init_std),
            attn: Attention::new(rng, c.d_model, c.fusion_heads),
            norm: LayerNorm::new(c.d_model, c.risk_norm_affine, c.ln_eps),
        }
    }

    fn forward(&self, pci: &ArrayView1<F>, emb: &ArrayView1<F>, alpha: f64) -> Result<(RiskOutput<F>, RiskCache<F>), ModelError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(ModelError::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        check_width("plan_context_intent", pci, self.text_proj.out_dim())?;
        check_width("risk_plan embedding", emb, self.text_proj.in_dim())?;
        let emb = row(emb);
        let risk_vec = self.text_proj.forward(&emb.view());
        let q = row(pci);
        let (c, ac) = self.attn.forward(&q.view(), &risk_vec.view());
        let a = cst::<F>(alpha);
        let pre = &q + &c.mapv(|v| v * a);
        let (out, nc) = self.norm.forward(&pre.view());
        Ok((
            RiskOutput {
                risk_vec: flat(risk_vec),
                c_attn: flat(c),
                plan_context_ctrl: flat(out),
            },
            RiskCache {
                emb,
                alpha: a,
                attn: ac,
                norm: nc,
            },
        ))
    }

    /// Returns `d_plan_context_intent`.
    fn backward(&self, c: &RiskCache<F>, dout: &ArrayView2<F>, g: &mut RiskAttention<F>) -> Array2<F> {
        let dpre = self.norm.backward(&c.norm, dout, &mut g.norm);
        let dc = dpre.mapv(|v| v * c.alpha);
        let (dq, dkv) = self.attn.backward(&c.attn, &dc.view(), &mut g.attn);
        self.text_proj.backward_params(&c.emb.view(), &dkv.view(), &mut g.text_proj);
        dpre + dq
    }
}

// ---------------------------------------------------------------- decoder

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDecoder<F> {
    /// `[t_future, d_model]` learned temporal queries.
    pub queries: Array2<F>,
    pub layers: Vec<DecoderLayer<F>>,
    pub norm: LayerNorm<F>,
    pub head: Mlp<F>,
}
impl_params!(TrajectoryDecoder { queries, layers, norm, head });

struct DecoderCache<F> {
    layers: Vec<DecoderLayerCache<F>>,
    norm: LayerNormCache<F>,
    head: MlpCache<F>,
    memory_rows: usize,
}

impl<F: Scalar> TrajectoryDecoder<F> {
    fn new(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        TrajectoryDecoder {
            queries: trunc_normal(rng, c.t_future, c.d_model, c.init_std),
            layers: (0..c.decoder_layers)
                .map(|_| DecoderLayer::new(rng, c.d_model, c.decoder_heads, c.mlp_ratio, c.ln_eps))
                .collect(),
            norm: LayerNorm::new(c.d_model, true, c.ln_eps),
            head: Mlp::new(rng, c.d_model, c.hidden(c.d_model), 2),
        }
    }

    /// Returns per-step displacements `[t_future, 2]`.
    fn forward(&self, memory: &ArrayView2<F>) -> (Array2<F>, DecoderCache<F>) {
        let mut x = self.queries.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&x.view(), memory);
            caches.push(c);
            x = y;
        }
        let (n, nc) = self.norm.forward(&x.view());
        let (delta, hc) = self.head.forward(&n.view());
        (
            delta,
            DecoderCache {
                layers: caches,
                norm: nc,
                head: hc,
                memory_rows: memory.nrows(),
            },
        )
    }

    /// Returns `d_memory`.
    fn backward(&self, c: &DecoderCache<F>, d_delta: &ArrayView2<F>, g: &mut TrajectoryDecoder<F>) -> Array2<F> {
        let dn = self.head.backward(&c.head, d_delta, &mut g.head);
        let mut dx = self.norm.backward(&c.norm, &dn.view(), &mut g.norm);
        let mut dmem = Array2::zeros((c.memory_rows, self.queries.ncols()));
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (d, dm) = layer.backward(&c.layers[k], &dx.view(), &mut g.layers[k]);
            dmem += &dm;
            dx = d;
        }
        g.queries += &dx;
        dmem
    }
}

// ---------------------------------------------------------------- full network

/// Every intermediate context vector of one forward pass. Vectors belonging
/// to a path removed by an ablation flag are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionContexts<F> {
    pub v_global: Array1<F>,
    pub s_global: Option<Array1<F>>,
    pub scene: Option<SceneFusionOutput<F>>,
    pub scene_context: Array1<F>,
    pub plan_context: Array1<F>,
    pub modulation: Option<IntentModulation<F>>,
    pub plan_context_intent: Array1<F>,
    pub risk: Option<RiskOutput<F>>,
    pub plan_context_ctrl: Array1<F>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<F> {
    flags: AblationFlags,
    n_tokens: usize,
    vision: Vec<CameraCache<F>>,
    state: Option<StateCache<F>>,
    scene: Option<SceneCache<F>>,
    plan: Option<MlpCache<F>>,
    intent: Option<IntentCache<F>>,
    risk: Option<RiskCache<F>>,
    decoder: DecoderCache<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriModalNet<F> {
    pub vision: VisionEncoder<F>,
    pub state: StateEncoder<F>,
    pub scene: SceneFusion<F>,
    pub plan: PlanFusion<F>,
    pub intent: IntentModulator<F>,
    pub risk: RiskAttention<F>,
    pub decoder: TrajectoryDecoder<F>,
    /// Architecture the parameters were built for; `alpha`,
    /// `displacement_scale` and `memory_includes_visual_tokens` are read
    /// from here at run time.
    pub config: ModelConfig,
}
impl_params!(TriModalNet { vision, state, scene, plan, intent, risk, decoder });

impl<F: Scalar> TriModalNet<F> {
    /// Randomly initialized network. Shapes are checked with
    /// [`ModelConfig::validate_shapes`].
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(TriModalNet {
            vision: VisionEncoder::new(&mut rng, config),
            state: StateEncoder::new(&mut rng, config),
            scene: SceneFusion::new(&mut rng, config),
            plan: PlanFusion::new(&mut rng, config),
            intent: IntentModulator::new(&mut rng, config),
            risk: RiskAttention::new(&mut rng, config),
            decoder: TrajectoryDecoder::new(&mut rng, config),
            config: config.clone(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.decoder.queries.ncols()
    }

    pub fn t_future(&self) -> usize {
        self.decoder.queries.nrows()
    }

    pub fn encode_vision(&self, patches: &[Array2<F>]) -> Result<VisualFeatures<F>, ModelError> {
        Ok(self.vision.forward(patches)?.0)
    }

    /// `history` is `[16, 6]` rows of `[x, y, vx, vy, ax, ay]`.
    pub fn encode_state(&self, history: &ArrayView2<F>) -> Result<Array1<F>, ModelError> {
        Ok(self.state.forward(history)?.0)
    }

    pub fn fuse_scene(&self, vf: &VisualFeatures<F>, scene_emb: &ArrayView1<F>) -> Result<SceneFusionOutput<F>, ModelError> {
        Ok(self.scene.forward(vf, scene_emb)?.0)
    }

    pub fn fuse_planning(&self, scene_context: &ArrayView1<F>, s_global: &ArrayView1<F>) -> Result<Array1<F>, ModelError> {
        Ok(self.plan.forward(scene_context, s_global)?.0)
    }

    pub fn modulate_intent(
        &self,
        plan_context: &ArrayView1<F>,
        intent: DrivingIntent,
    ) -> Result<(Array1<F>, IntentModulation<F>), ModelError> {
        let (out, m, _) = self.intent.forward(plan_context, intent)?;
        Ok((out, m))
    }

    pub fn risk_cross_attention(
        &self,
        plan_context_intent: &ArrayView1<F>,
        risk_plan_emb: &ArrayView1<F>,
        alpha: f64,
    ) -> Result<RiskOutput<F>, ModelError> {
        Ok(self.risk.forward(plan_context_intent, risk_plan_emb, alpha)?.0)
    }

    /// Decodes waypoints `[t_future, 2]` from the control context. When the
    /// memory hook is enabled, `visual_tokens` must be supplied.
    pub fn decode_trajectory(
        &self,
        plan_context_ctrl: &ArrayView1<F>,
        visual_tokens: Option<&Array2<F>>,
    ) -> Result<Array2<F>, ModelError> {
        check_width("plan_context_ctrl", plan_context_ctrl, self.d_model())?;
        let memory = self.memory(plan_context_ctrl, visual_tokens)?;
        let (delta, _) = self.decoder.forward(&memory.view());
        Ok(cumulative_waypoints(&delta.view(), cst(self.config.displacement_scale)))
    }

    fn memory(&self, ctrl: &ArrayView1<F>, visual_tokens: Option<&Array2<F>>) -> Result<Array2<F>, ModelError> {
        let ctrl = row(ctrl);
        if !self.config.memory_includes_visual_tokens {
            return Ok(ctrl);
        }
        let vt = visual_tokens
            .ok_or_else(|| ModelError::Input("decoder memory hook needs the visual tokens".into()))?;
        Ok(concatenate(Axis(0), &[ctrl.view(), vt.view()]).expect("same width"))
    }

    /// Waypoints `[t_future, 2]` for one sample.
    pub fn forward(&self, input: &ModelInput<F>, flags: AblationFlags) -> Result<Array2<F>, ModelError> {
        Ok(self.forward_train(input, flags)?.0)
    }

    /// Waypoints plus every intermediate context.
    pub fn forward_with_contexts(
        &self,
        input: &ModelInput<F>,
        flags: AblationFlags,
    ) -> Result<(Array2<F>, FusionContexts<F>), ModelError> {
        let (w, ctx, _) = self.run(input, flags)?;
        Ok((w, ctx))
    }

    /// Forward pass keeping the activations needed by [`backward`](Self::backward).
    pub fn forward_train(&self, input: &ModelInput<F>, flags: AblationFlags) -> Result<(Array2<F>, ForwardCache<F>), ModelError> {
        let (w, _, cache) = self.run(input, flags)?;
        Ok((w, cache))
    }

    fn run(
        &self,
        input: &ModelInput<F>,
        flags: AblationFlags,
    ) -> Result<(Array2<F>, FusionContexts<F>, ForwardCache<F>), ModelError> {
        let instructions = if flags.no_instruction {
            None
        } else {
            Some(input.instructions.as_ref().ok_or_else(|| {
                ModelError::Input("instruction embeddings are required unless no_instruction is set".into())
            })?)
        };
        let (vf, vision_cache) = self.vision.forward(&input.patches)?;

        let (s_global, state_cache) = if flags.no_state {
            (None, None)
        } else {
            let (s, c) = self.state.forward(&input.history.view())?;
            (Some(s), Some(c))
        };

        let (scene_out, scene_cache) = match instructions {
            Some(ins) => {
                let (o, c) = self.scene.forward(&vf, &ins.scene_emb.view())?;
                (Some(o), Some(c))
            }
            None => (None, None),
        };
        let scene_context = scene_out
            .as_ref()
            .map_or_else(|| vf.v_global.clone(), |o| o.scene_context.clone());

        let (plan_context, plan_cache) = match &s_global {
            Some(s) => {
                let (p, c) = self.plan.forward(&scene_context.view(), &s.view())?;
                (p, Some(c))
            }
            None => (scene_context.clone(), None),
        };

        let (pci, modulation, intent_cache) = if flags.no_intent {
            (plan_context.clone(), None, None)
        } else {
            let (o, m, c) = self.intent.forward(&plan_context.view(), input.intent)?;
            (o, Some(m), Some(c))
        };

        let (risk_out, risk_cache) = match instructions {
            Some(ins) => {
                let (o, c) = self.risk.forward(&pci.view(), &ins.risk_plan_emb.view(), self.config.alpha)?;
                (Some(o), Some(c))
            }
            None => (None, None),
        };
        let ctrl = risk_out
            .as_ref()
            .map_or_else(|| pci.clone(), |o| o.plan_context_ctrl.clone());

        let memory = self.memory(&ctrl.view(), Some(&vf.v_tokens))?;
        let (delta, decoder_cache) = self.decoder.forward(&memory.view());
        let waypoints = cumulative_waypoints(&delta.view(), cst(self.config.displacement_scale));

        let n_tokens = vf.v_tokens.nrows();
        let contexts = FusionContexts {
            v_global: vf.v_global,
            s_global,
            scene: scene_out,
            scene_context,
            plan_context,
            modulation,
            plan_context_intent: pci,
            risk: risk_out,
            plan_context_ctrl: ctrl,
        };
        let cache = ForwardCache {
            flags,
            n_tokens,
            vision: vision_cache,
            state: state_cache,
            scene: scene_cache,
            plan: plan_cache,
            intent: intent_cache,
            risk: risk_cache,
            decoder: decoder_cache,
        };
        Ok((waypoints, contexts, cache))
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the predicted waypoints is `d_waypoints`.
    pub fn backward(&self, cache: &ForwardCache<F>, d_waypoints: &ArrayView2<F>, grads: &mut TriModalNet<F>) {
        let d = self.d_model();
        let d_delta = cumulative_waypoints_backward(d_waypoints, cst(self.config.displacement_scale));
        let dmem = self.decoder.backward(&cache.decoder, &d_delta.view(), &mut grads.decoder);
        let mut d_tokens: Array2<F> = Array2::zeros((cache.n_tokens, d));
        if self.config.memory_includes_visual_tokens {
            d_tokens += &dmem.slice(s![1.., ..]);
        }
        let d_ctrl = dmem.slice(s![0..1, ..]).to_owned();

        let d_pci = match &cache.risk {
            Some(rc) => self.risk.backward(rc, &d_ctrl.view(), &mut grads.risk),
            None => d_ctrl,
        };
        let d_pc = match &cache.intent {
            Some(ic) => self.intent.backward(ic, &d_pci.view(), &mut grads.intent),
            None => d_pci,
        };
        let (d_scene_ctx, d_s_global) = match &cache.plan {
            Some(pc) => {
                let (a, b) = self.plan.backward(pc, &d_pc.view(), &mut grads.plan);
                (a, Some(b))
            }
            None => (d_pc, None),
        };
        if let (Some(sc), Some(ds)) = (&cache.state, d_s_global) {
            self.state.backward(sc, &ds.row(0), &mut grads.state);
        }
        let d_vglobal = match &cache.scene {
            Some(sc) => {
                let (dt, dvg) = self.scene.backward(sc, &d_scene_ctx.view(), &mut grads.scene);
                d_tokens += &dt;
                dvg
            }
            None => d_scene_ctx,
        };
        debug_assert_eq!(cache.flags.no_instruction, cache.scene.is_none());
        let inv = cst::<F>(1.0 / cache.n_tokens as f64);
        d_tokens += &d_vglobal.mapv(|v| v * inv);
        self.vision.backward(&cache.vision, &d_tokens.view(), &mut grads.vision);
    }

    /// Forward pass returning a validated 20-point trajectory in metres.
    pub fn predict(&self, input: &ModelInput<F>, flags: AblationFlags) -> Result<Trajectory, ModelError> {
        let w = self.forward(input, flags)?;
        let pts: Vec<[f64; 2]> = w
            .rows()
            .into_iter()
            .map(|r| [r[0].to_f64().unwrap_or(f64::NAN), r[1].to_f64().unwrap_or(f64::NAN)])
            .collect();
        Trajectory::new(pts).map_err(ModelError::Shape)
    }

    /// Batched forward: `[B, t_future, 2]`.
    pub fn forward_batch(&self, inputs: &[ModelInput<F>], flags: AblationFlags) -> Result<ndarray::Array3<F>, ModelError> {
        let mut out = ndarray::Array3::zeros((inputs.len(), self.t_future(), 2));
        for (b, input) in inputs.iter().enumerate() {
            out.index_axis_mut(Axis(0), b).assign(&self.forward(input, flags)?);
        }
        Ok(out)
    }
}
