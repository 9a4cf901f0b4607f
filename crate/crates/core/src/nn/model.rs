use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::dsp::FeaturePair;
use crate::error::{config, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Whisper,
    Ultrasonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Contrastive,
    Auth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub whisper_dim: usize,
    pub ultra_dim: usize,
    pub channels: usize,
    pub hidden: usize,
    pub embed: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub gru_layers: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            whisper_dim: 640,
            ultra_dim: 200,
            channels: 128,
            hidden: 128,
            embed: 128,
            kernel: 3,
            dilations: vec![1, 2, 4],
            gru_layers: 2,
            classes: 27,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("whisper_dim", self.whisper_dim),
            ("ultra_dim", self.ultra_dim),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("kernel", self.kernel),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return config(format!("model {name} must be positive"));
        }
        if self.classes < 2 {
            return config("spelling head needs a blank plus at least one letter");
        }
        if self.dilations.contains(&0) {
            return config("dilations must be positive");
        }
        Ok(())
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Whisper => self.whisper_dim,
            Modality::Ultrasonic => self.ultra_dim,
        }
    }

    /// Past windows visible to one TCN output: `(kernel − 1) · Σ dilations`.
    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }
}

/// Flat named parameter list; layers hold indices into it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

struct Init<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform fan-in weights: `U(−√(6/in), √(6/in))`.
    fn weight(&mut self, name: String, fan_in: usize, out: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let values = (0..fan_in * out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.store.add(
            name,
            Tensor {
                shape: vec![fan_in, out],
                values,
                grad: None,
            },
        )
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.store.add(name, Tensor::zeros(vec![rows, cols]))
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), fan_in, out),
            b: self.zeros(format!("{name}.b"), 1, out),
        }
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, out: usize) -> Linear {
        Linear {
            w: self.zeros(format!("{name}.w"), fan_in, out),
            b: self.zeros(format!("{name}.b"), 1, out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnBlock {
    pub conv: Linear,
    /// 1×1 projection on the skip path when the width changes.
    pub proj: Option<usize>,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub wx: usize,
    pub bx: usize,
    pub wh: usize,
    pub bh: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub tcn: Vec<TcnBlock>,
    pub gru: Vec<(GruCell, GruCell)>,
    pub embed: Linear,
}

/// `x + W2·relu(W1·x + b1) + b2`; starts as the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualHead {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpellHead {
    pub l1: Linear,
    pub l2: Linear,
}

/// Per-dimension standardization applied to raw features before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "feature width {} != {dim}",
                    row.len()
                )));
            }
            n += 1;
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        if n == 0 {
            return Err(Error::Data("no feature rows to fit normalization".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                1.0 / var.sqrt().max(1e-6)
            })
            .collect();
        Ok(Self { mean, inv_std })
    }

    pub fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(
            row.iter()
                .zip(&self.mean)
                .zip(&self.inv_std)
                .map(|((v, m), s)| (v - m) * s),
        );
    }
}

/// Shared-architecture, modality-specific encoders with projection,
/// authentication and spelling heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub enc_w: Encoder,
    pub enc_u: Encoder,
    pub proj_w: ResidualHead,
    pub proj_u: ResidualHead,
    pub auth_w: ResidualHead,
    pub auth_u: ResidualHead,
    pub spell: SpellHead,
    pub norm_w: FeatureNorm,
    pub norm_u: FeatureNorm,
}

/// Graph handles for one utterance.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceVars {
    pub h_w: Var,
    pub h_u: Var,
    pub z_w: Var,
    pub z_u: Var,
    pub a_w: Var,
    pub a_u: Var,
    pub log_probs: Option<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let enc_w = build_encoder(&mut init, &config, "enc_w", config.whisper_dim);
        let enc_u = build_encoder(&mut init, &config, "enc_u", config.ultra_dim);
        let d = config.embed;
        let mut head = |name: &str| ResidualHead {
            l1: init.linear(&format!("{name}.l1"), d, d),
            l2: init.zero_linear(&format!("{name}.l2"), d, d),
        };
        let (proj_w, proj_u) = (head("proj_w"), head("proj_u"));
        let (auth_w, auth_u) = (head("auth_w"), head("auth_u"));
        let spell = SpellHead {
            l1: init.linear("spell.l1", 2 * d, d),
            l2: init.linear("spell.l2", d, config.classes),
        };
        Ok(Self {
            norm_w: FeatureNorm::identity(config.whisper_dim),
            norm_u: FeatureNorm::identity(config.ultra_dim),
            config,
            params,
            enc_w,
            enc_u,
            proj_w,
            proj_u,
            auth_w,
            auth_u,
            spell,
        })
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::Whisper => &self.enc_w,
            Modality::Ultrasonic => &self.enc_u,
        }
    }

    pub fn head(&self, kind: HeadKind, m: Modality) -> &ResidualHead {
        match (kind, m) {
            (HeadKind::Contrastive, Modality::Whisper) => &self.proj_w,
            (HeadKind::Contrastive, Modality::Ultrasonic) => &self.proj_u,
            (HeadKind::Auth, Modality::Whisper) => &self.auth_w,
            (HeadKind::Auth, Modality::Ultrasonic) => &self.auth_u,
        }
    }

    pub fn norm(&self, m: Modality) -> &FeatureNorm {
        match m {
            Modality::Whisper => &self.norm_w,
            Modality::Ultrasonic => &self.norm_u,
        }
    }

    /// Stacks raw per-window feature rows into a standardized `T × width` tensor.
    pub fn prepare<'r>(
        &self,
        rows: impl IntoIterator<Item = &'r [f64]>,
        m: Modality,
    ) -> Result<Tensor> {
        let width = self.config.input_dim(m);
        let norm = self.norm(m);
        let mut values = Vec::new();
        let mut t = 0;
        for row in rows {
            if row.len() != width {
                return Err(Error::Shape(format!(
                    "{m:?} features have width {}, expected {width}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("encoder input"));
            }
            norm.apply(row, &mut values);
            t += 1;
        }
        Tensor::matrix(t, width, values)
    }

    fn p<'a>(&'a self, tape: &mut Tape<'a>, id: usize) -> Var {
        tape.param(id, &self.params.tensors[id])
    }

    fn linear<'a>(&'a self, tape: &mut Tape<'a>, l: Linear, x: Var) -> Var {
        let w = self.p(tape, l.w);
        let b = self.p(tape, l.b);
        tape.affine(x, w, b)
    }

    /// TCN stack only: causal dilated residual blocks.
    pub fn tcn<'a>(&'a self, tape: &mut Tape<'a>, m: Modality, x: Var) -> Var {
        let mut h = x;
        for block in &self.encoder(m).tcn {
            let taps: Vec<Var> = (0..self.config.kernel)
                .map(|j| tape.shift_rows(h, j * block.dilation))
                .collect();
            let stacked = tape.concat_cols(&taps);
            let conv = self.linear(tape, block.conv, stacked);
            let act = tape.relu(conv);
            let skip = match block.proj {
                Some(id) => {
                    let w = self.p(tape, id);
                    tape.matmul(h, w)
                }
                None => h,
            };
            h = tape.add(act, skip);
        }
        h
    }

    fn gru_direction<'a>(&'a self, tape: &mut Tape<'a>, cell: GruCell, x: Var) -> Var {
        let hsz = self.config.hidden;
        let wx = self.p(tape, cell.wx);
        let bx = self.p(tape, cell.bx);
        let wh = self.p(tape, cell.wh);
        let bh = self.p(tape, cell.bh);
        let gates_x = tape.affine(x, wx, bx);
        let mut h = tape.input(1, hsz, vec![0.0; hsz]);
        let mut outs = Vec::with_capacity(tape.rows(x));
        for t in 0..tape.rows(x) {
            let gx = tape.row(gates_x, t);
            let gh = tape.affine(h, wh, bh);
            let (xr, hr) = (tape.slice_cols(gx, 0, hsz), tape.slice_cols(gh, 0, hsz));
            let (xz, hz) = (tape.slice_cols(gx, hsz, hsz), tape.slice_cols(gh, hsz, hsz));
            let (xn, hn) = (
                tape.slice_cols(gx, 2 * hsz, hsz),
                tape.slice_cols(gh, 2 * hsz, hsz),
            );
            let r_pre = tape.add(xr, hr);
            let r = tape.sigmoid(r_pre);
            let z_pre = tape.add(xz, hz);
            let z = tape.sigmoid(z_pre);
            let rn = tape.mul(r, hn);
            let n_pre = tape.add(xn, rn);
            let n = tape.tanh(n_pre);
            // h' = (1 − z)·n + z·h = n + z·(h − n)
            let diff = tape.sub(h, n);
            let zd = tape.mul(z, diff);
            h = tape.add(n, zd);
            outs.push(h);
        }
        tape.stack_rows(&outs)
    }

    /// One bidirectional layer: `[forward ‖ backward]`, `T × 2H`.
    pub fn bigru_layer<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        cells: (GruCell, GruCell),
        x: Var,
    ) -> Var {
        let fwd = self.gru_direction(tape, cells.0, x);
        let rev = tape.reverse_rows(x);
        let bwd_rev = self.gru_direction(tape, cells.1, rev);
        let bwd = tape.reverse_rows(bwd_rev);
        tape.concat_cols(&[fwd, bwd])
    }

    /// Per-window embeddings, `T × d`.
    pub fn encode<'a>(&'a self, tape: &mut Tape<'a>, m: Modality, x: Var) -> Var {
        let mut h = self.tcn(tape, m, x);
        for &cells in &self.encoder(m).gru {
            h = self.bigru_layer(tape, cells, h);
        }
        let e = self.linear(tape, self.encoder(m).embed, h);
        tape.tanh(e)
    }

    /// Head applied to a `1 × d` (or `T × d`) input; contrastive outputs are
    /// L2-normalized per row.
    pub fn head_forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        kind: HeadKind,
        m: Modality,
        x: Var,
    ) -> Var {
        let y = self.head_residual(tape, *self.head(kind, m), x);
        match kind {
            HeadKind::Contrastive => tape.l2_normalize_rows(y),
            HeadKind::Auth => y,
        }
    }

    fn head_residual<'a>(&'a self, tape: &mut Tape<'a>, head: ResidualHead, x: Var) -> Var {
        let a = self.linear(tape, head.l1, x);
        let a = tape.relu(a);
        let b = self.linear(tape, head.l2, a);
        tape.add(x, b)
    }

    /// `T × classes` log-probabilities from concatenated embeddings `T × 2d`.
    pub fn spell_forward<'a>(&'a self, tape: &mut Tape<'a>, c: Var) -> Var {
        let a = self.linear(tape, self.spell.l1, c);
        let a = tape.relu(a);
        let logits = self.linear(tape, self.spell.l2, a);
        tape.log_softmax_rows(logits)
    }

    /// Full forward pass of one utterance given prepared inputs with equal
    /// window counts.
    pub fn forward_utterance<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x_w: &Tensor,
        x_u: &Tensor,
        spell: bool,
    ) -> Result<UtteranceVars> {
        self.check_input(x_w, Modality::Whisper)?;
        self.check_input(x_u, Modality::Ultrasonic)?;
        if x_w.rows() != x_u.rows() {
            return Err(Error::Shape(format!(
                "window counts differ: {} whisper vs {} ultrasonic",
                x_w.rows(),
                x_u.rows()
            )));
        }
        let xw = tape.input_tensor(x_w);
        let xu = tape.input_tensor(x_u);
        let h_w = self.encode(tape, Modality::Whisper, xw);
        let h_u = self.encode(tape, Modality::Ultrasonic, xu);
        let pw = tape.mean_rows(h_w);
        let pu = tape.mean_rows(h_u);
        let z_w = self.head_forward(tape, HeadKind::Contrastive, Modality::Whisper, pw);
        let z_u = self.head_forward(tape, HeadKind::Contrastive, Modality::Ultrasonic, pu);
        let a_w = self.head_forward(tape, HeadKind::Auth, Modality::Whisper, pw);
        let a_u = self.head_forward(tape, HeadKind::Auth, Modality::Ultrasonic, pu);
        let log_probs = spell.then(|| {
            let c = tape.concat_cols(&[h_w, h_u]);
            self.spell_forward(tape, c)
        });
        Ok(UtteranceVars {
            h_w,
            h_u,
            z_w,
            z_u,
            a_w,
            a_u,
            log_probs,
        })
    }

    fn check_input(&self, x: &Tensor, m: Modality) -> Result<()> {
        let width = self.config.input_dim(m);
        if x.rows() == 0 {
            return Err(Error::Shape("encoder needs at least one window".into()));
        }
        if x.cols() != width {
            return Err(Error::Shape(format!(
                "{m:?} input width {} != {width}",
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("encoder input"));
        }
        Ok(())
    }
}

fn build_encoder(init: &mut Init<'_>, c: &ModelConfig, name: &str, input: usize) -> Encoder {
    let mut tcn = Vec::new();
    let mut width = input;
    for (i, &dilation) in c.dilations.iter().enumerate() {
        let conv = init.linear(&format!("{name}.tcn{i}.conv"), c.kernel * width, c.channels);
        let proj = (width != c.channels)
            .then(|| init.weight(format!("{name}.tcn{i}.proj"), width, c.channels));
        tcn.push(TcnBlock {
            conv,
            proj,
            dilation,
        });
        width = c.channels;
    }
    let mut gru = Vec::new();
    for l in 0..c.gru_layers {
        let mut cell = |dir: &str| GruCell {
            wx: init.weight(format!("{name}.gru{l}.{dir}.wx"), width, 3 * c.hidden),
            bx: init.zeros(format!("{name}.gru{l}.{dir}.bx"), 1, 3 * c.hidden),
            wh: init.weight(format!("{name}.gru{l}.{dir}.wh"), c.hidden, 3 * c.hidden),
            bh: init.zeros(format!("{name}.gru{l}.{dir}.bh"), 1, 3 * c.hidden),
        };
        gru.push((cell("fwd"), cell("bwd")));
        width = 2 * c.hidden;
    }
    let embed = init.linear(&format!("{name}.embed"), width, c.embed);
    Encoder { tcn, gru, embed }
}

/// Runs one encoder on prepared input and returns the `T × d` embeddings.
pub fn encoder_forward(model: &Model, x: &Tensor, m: Modality) -> Result<Tensor> {
    model.check_input(x, m)?;
    let mut tape = Tape::new();
    let xv = tape.input_tensor(x);
    let h = model.encode(&mut tape, m, xv);
    finite(tape.to_tensor(h), "encoder output")
}

/// Applies a head to a pooled `d`-vector.
pub fn project(model: &Model, h: &[f64], kind: HeadKind, m: Modality) -> Result<Vec<f64>> {
    if h.len() != model.config.embed {
        return Err(Error::Shape(format!(
            "head input has {} dims, expected {}",
            h.len(),
            model.config.embed
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("head input"));
    }
    let mut tape = Tape::new();
    let x = tape.input(1, h.len(), h.to_vec());
    let mut y = model.head_residual(&mut tape, *model.head(kind, m), x);
    if kind == HeadKind::Contrastive {
        if tape.value(y).iter().all(|v| *v == 0.0) {
            return Err(Error::ZeroNorm("contrastive head output"));
        }
        y = tape.l2_normalize_rows(y);
    }
    Ok(finite(tape.to_tensor(y), "head output")?.values)
}

/// Row-wise `[h_w ‖ h_u]`.
pub fn concat_embeddings(h_w: &Tensor, h_u: &Tensor) -> Result<Tensor> {
    if h_w.rows() != h_u.rows() {
        return Err(Error::Shape(format!(
            "cannot concatenate {} and {} windows",
            h_w.rows(),
            h_u.rows()
        )));
    }
    let (cw, cu) = (h_w.cols(), h_u.cols());
    let mut values = Vec::with_capacity(h_w.rows() * (cw + cu));
    for i in 0..h_w.rows() {
        values.extend_from_slice(h_w.row(i));
        values.extend_from_slice(h_u.row(i));
    }
    Tensor::matrix(h_w.rows(), cw + cu, values)
}

/// Per-window log-distributions from concatenated embeddings.
pub fn spell_logits(model: &Model, c: &Tensor) -> Result<Tensor> {
    if c.rows() == 0 || c.cols() != 2 * model.config.embed {
        return Err(Error::Shape(format!(
            "spelling input must be T×{} with T ≥ 1, got {:?}",
            2 * model.config.embed,
            c.shape
        )));
    }
    let mut tape = Tape::new();
    let x = tape.input_tensor(c);
    let y = model.spell_forward(&mut tape, x);
    finite(tape.to_tensor(y), "spelling output")
}

fn finite(t: Tensor, what: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Utterance-level outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub z_w: Vec<f64>,
    pub z_u: Vec<f64>,
    pub a_w: Vec<f64>,
    pub a_u: Vec<f64>,
    /// `T × classes`; empty when spelling was not requested.
    pub log_probs: Vec<Vec<f64>>,
}

impl Model {
    /// Standardized `(whisper, ultrasonic)` inputs for a window sequence.
    pub fn prepare_pairs(&self, feats: &[FeaturePair]) -> Result<(Tensor, Tensor)> {
        let xw = self.prepare(
            feats.iter().map(|f| f.mel_patch.as_slice()),
            Modality::Whisper,
        )?;
        let xu = self.prepare(
            feats.iter().map(|f| f.ar_coeffs.as_slice()),
            Modality::Ultrasonic,
        )?;
        Ok((xw, xu))
    }

    pub fn infer(&self, feats: &[FeaturePair], spell: bool) -> Result<Inference> {
        let (xw, xu) = self.prepare_pairs(feats)?;
        let mut tape = Tape::new();
        let v = self.forward_utterance(&mut tape, &xw, &xu, spell)?;
        let out = Inference {
            z_w: tape.value(v.z_w).to_vec(),
            z_u: tape.value(v.z_u).to_vec(),
            a_w: tape.value(v.a_w).to_vec(),
            a_u: tape.value(v.a_u).to_vec(),
            log_probs: v
                .log_probs
                .map_or(Vec::new(), |lp| tape.to_tensor(lp).to_rows()),
        };
        let finite = |x: &[f64]| x.iter().all(|v| v.is_finite());
        if !(finite(&out.z_w) && finite(&out.z_u) && finite(&out.a_w) && finite(&out.a_u)) {
            return Err(Error::NonFinite("utterance embedding"));
        }
        Ok(out)
    }
}
