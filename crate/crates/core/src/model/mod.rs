//! Multi-exit transformer encoder: token/position embeddings, pre-norm
//! encoder blocks, and one classifier exit per layer. The default exit is an
//! attention exit (down-projection -> tanh -> multi-head self-attention ->
//! [CLS] -> tanh -> linear classifier); a plain linear exit is available for
//! ablations. Column k of an exit's classifier matrix is the label
//! embedding for class k.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_checkpoint_bytes};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExitKind {
    #[default]
    Mha,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Exit hidden width. Kept well below d_model by default so an exit is
    /// cheap next to an encoder layer.
    pub d_e: usize,
    #[serde(default = "default_exit_heads")]
    pub exit_heads: usize,
    pub n_classes: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub exit_kind: ExitKind,
}

fn default_exit_heads() -> usize {
    2
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on one CPU core while
    /// exercising every mechanism.
    pub fn desk_default(vocab_size: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            d_e: 16,
            exit_heads: 2,
            n_classes,
            max_seq_len: 32,
            dropout_rate: 0.1,
            exit_kind: ExitKind::Mha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Validation("n_layers must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Validation("n_classes must be >= 2".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_e == 0 || self.exit_heads == 0 || self.d_e % self.exit_heads != 0 {
            return Err(Error::Validation(format!(
                "d_e {} must be divisible by exit_heads {}",
                self.d_e, self.exit_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Validation("vocab_size must cover reserved ids".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Validation("max_seq_len must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Which part of the model a parameter belongs to. Exit numbering is
/// 1-based throughout the public API.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Backbone,
    Exit(usize),
}

/// Selects a set of parameters, e.g. for training-stage freezing or
/// gradient flattening.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    Backbone,
    BackboneAndExit(usize),
    Exit(usize),
}

impl Scope {
    pub fn contains(self, owner: Owner) -> bool {
        match (self, owner) {
            (Scope::All, _) => true,
            (Scope::Backbone, Owner::Backbone) => true,
            (Scope::BackboneAndExit(_), Owner::Backbone) => true,
            (Scope::BackboneAndExit(m), Owner::Exit(e)) => e == m,
            (Scope::Exit(m), Owner::Exit(e)) => e == m,
            _ => false,
        }
    }

    pub fn label(self) -> String {
        match self {
            Scope::All => "all".to_string(),
            Scope::Backbone => "backbone".to_string(),
            Scope::BackboneAndExit(m) => format!("backbone+exit{m}"),
            Scope::Exit(m) => format!("exit{m}"),
        }
    }
}

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(usize);

impl PId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) fn pid_for_index(idx: usize) -> PId {
    PId(idx)
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub owner: Owner,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered parameter registry. Registration order is the canonical order
/// for checkpoints, flattened gradients, and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    fn register(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>, owner: Owner) -> PId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Parameter {
            name,
            shape,
            data,
            owner,
        });
        PId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: PId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (PId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (PId(i), p))
    }

    pub fn total_elems(&self, scope: Scope) -> usize {
        self.params
            .iter()
            .filter(|p| scope.contains(p.owner))
            .map(|p| p.data.len())
            .sum()
    }

    #[cfg(test)]
    pub(crate) fn register_for_test(
        &mut self,
        name: String,
        shape: Vec<usize>,
        data: Vec<f64>,
        owner: Owner,
    ) -> PId {
        self.register(name, shape, data, owner)
    }
}

/// Tape bindings for (a subset of) the parameters. Parameters outside the
/// bound include-set have no tensor; touching them is a bug surfaced as a
/// tape error.
pub struct Bound {
    tensors: Vec<Option<Tensor>>,
}

impl Bound {
    pub fn get(&self, id: PId) -> Result<&Tensor> {
        self.tensors[id.0]
            .as_ref()
            .ok_or_else(|| Error::Tape(format!("parameter {} not bound on this tape", id.0)))
    }

    pub fn try_get(&self, id: PId) -> Option<&Tensor> {
        self.tensors[id.0].as_ref()
    }
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1_g: PId,
    ln1_b: PId,
    wq: PId,
    bq: PId,
    wk: PId,
    bk: PId,
    wv: PId,
    bv: PId,
    wo: PId,
    bo: PId,
    ln2_g: PId,
    ln2_b: PId,
    w1: PId,
    b1: PId,
    w2: PId,
    b2: PId,
}

#[derive(Clone, Copy, Debug)]
enum ExitP {
    Mha {
        down_w: PId,
        down_b: PId,
        wq: PId,
        bq: PId,
        wk: PId,
        bk: PId,
        wv: PId,
        bv: PId,
        wo: PId,
        bo: PId,
        wc: PId,
        bc: PId,
    },
    Linear {
        wc: PId,
        bc: PId,
    },
}

impl ExitP {
    fn classifier(&self) -> (PId, PId) {
        match self {
            ExitP::Mha { wc, bc, .. } => (*wc, *bc),
            ExitP::Linear { wc, bc } => (*wc, *bc),
        }
    }
}

pub struct MultiExitModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    tok_emb: PId,
    pos_emb: PId,
    layers: Vec<EncLayer>,
    exits: Vec<ExitP>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

const INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e9;

impl MultiExitModel {
    /// Fresh model with truncated-normal (std 0.02) weights and zero biases.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<MultiExitModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, "init"));
        let mut ps = ParamSet::default();
        let d = cfg.d_model;

        let w = |ps: &mut ParamSet, name: String, shape: Vec<usize>, owner: Owner, rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            let data = trunc_normal(rng, INIT_STD, n);
            ps.register(name, shape, data, owner)
        };
        let zeros = |ps: &mut ParamSet, name: String, shape: Vec<usize>, owner: Owner| {
            let n = shape.iter().product();
            ps.register(name, shape, vec![0.0; n], owner)
        };
        let ones = |ps: &mut ParamSet, name: String, shape: Vec<usize>, owner: Owner| {
            let n = shape.iter().product();
            ps.register(name, shape, vec![1.0; n], owner)
        };

        let tok_emb = w(&mut ps, "tok_emb".into(), vec![cfg.vocab_size, d], Owner::Backbone, &mut rng);
        let pos_emb = w(&mut ps, "pos_emb".into(), vec![cfg.max_seq_len, d], Owner::Backbone, &mut rng);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = |s: &str| format!("enc{i}.{s}");
            layers.push(EncLayer {
                ln1_g: ones(&mut ps, p("ln1.g"), vec![d], Owner::Backbone),
                ln1_b: zeros(&mut ps, p("ln1.b"), vec![d], Owner::Backbone),
                wq: w(&mut ps, p("attn.wq"), vec![d, d], Owner::Backbone, &mut rng),
                bq: zeros(&mut ps, p("attn.bq"), vec![d], Owner::Backbone),
                wk: w(&mut ps, p("attn.wk"), vec![d, d], Owner::Backbone, &mut rng),
                bk: zeros(&mut ps, p("attn.bk"), vec![d], Owner::Backbone),
                wv: w(&mut ps, p("attn.wv"), vec![d, d], Owner::Backbone, &mut rng),
                bv: zeros(&mut ps, p("attn.bv"), vec![d], Owner::Backbone),
                wo: w(&mut ps, p("attn.wo"), vec![d, d], Owner::Backbone, &mut rng),
                bo: zeros(&mut ps, p("attn.bo"), vec![d], Owner::Backbone),
                ln2_g: ones(&mut ps, p("ln2.g"), vec![d], Owner::Backbone),
                ln2_b: zeros(&mut ps, p("ln2.b"), vec![d], Owner::Backbone),
                w1: w(&mut ps, p("ffn.w1"), vec![d, cfg.d_ff], Owner::Backbone, &mut rng),
                b1: zeros(&mut ps, p("ffn.b1"), vec![cfg.d_ff], Owner::Backbone),
                w2: w(&mut ps, p("ffn.w2"), vec![cfg.d_ff, d], Owner::Backbone, &mut rng),
                b2: zeros(&mut ps, p("ffn.b2"), vec![d], Owner::Backbone),
            });
        }

        let mut exits = Vec::with_capacity(cfg.n_layers);
        for m in 1..=cfg.n_layers {
            let o = Owner::Exit(m);
            let p = |s: &str| format!("exit{m}.{s}");
            let e = match cfg.exit_kind {
                ExitKind::Mha => {
                    let de = cfg.d_e;
                    ExitP::Mha {
                        down_w: w(&mut ps, p("down.w"), vec![d, de], o, &mut rng),
                        down_b: zeros(&mut ps, p("down.b"), vec![de], o),
                        wq: w(&mut ps, p("attn.wq"), vec![de, de], o, &mut rng),
                        bq: zeros(&mut ps, p("attn.bq"), vec![de], o),
                        wk: w(&mut ps, p("attn.wk"), vec![de, de], o, &mut rng),
                        bk: zeros(&mut ps, p("attn.bk"), vec![de], o),
                        wv: w(&mut ps, p("attn.wv"), vec![de, de], o, &mut rng),
                        bv: zeros(&mut ps, p("attn.bv"), vec![de], o),
                        wo: w(&mut ps, p("attn.wo"), vec![de, de], o, &mut rng),
                        bo: zeros(&mut ps, p("attn.bo"), vec![de], o),
                        wc: w(&mut ps, p("wc"), vec![de, cfg.n_classes], o, &mut rng),
                        bc: zeros(&mut ps, p("bc"), vec![cfg.n_classes], o),
                    }
                }
                ExitKind::Linear => ExitP::Linear {
                    wc: w(&mut ps, p("wc"), vec![d, cfg.n_classes], o, &mut rng),
                    bc: zeros(&mut ps, p("bc"), vec![cfg.n_classes], o),
                },
            };
            exits.push(e);
        }

        Ok(MultiExitModel {
            cfg,
            params: ps,
            tok_emb,
            pos_emb,
            layers,
            exits,
        })
    }

    /// Bind parameters onto a tape. Parameters with owners outside `include`
    /// are left unbound; those inside `trainable` become gradient leaves.
    pub fn bind(&self, tape: &mut Tape, include: Scope, trainable: Option<Scope>) -> Result<Bound> {
        let mut tensors = Vec::with_capacity(self.params.len());
        for (_, p) in self.params.iter() {
            if include.contains(p.owner) {
                let rg = trainable.map(|s| s.contains(p.owner)).unwrap_or(false);
                tensors.push(Some(tape.leaf(p.data.clone(), p.shape.clone(), rg)?));
            } else {
                tensors.push(None);
            }
        }
        Ok(Bound { tensors })
    }

    /// Additive attention mask constant of shape [n*heads, l, l]: 0 for
    /// valid key positions, -1e9 for padding.
    pub fn attn_mask_for(&self, tape: &mut Tape, batch: &TokenBatch, heads: usize) -> Result<Tensor> {
        self.attn_mask(tape, batch, heads)
    }

    fn attn_mask(&self, tape: &mut Tape, batch: &TokenBatch, heads: usize) -> Result<Tensor> {
        let (n, l) = (batch.n, batch.l);
        let valid = batch.validity();
        let mut data = vec![0.0; n * heads * l * l];
        for b in 0..n {
            for j in 0..l {
                if valid[b * l + j] == 0.0 {
                    for h in 0..heads {
                        for i in 0..l {
                            data[((b * heads + h) * l + i) * l + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
        tape.constant(data, vec![n * heads, l, l])
    }

    /// Multi-head self-attention over `[n, l, dm]` with an additive mask of
    /// shape [n*heads, l, l]. Returns the output projection (no residual).
    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        wq: &Tensor,
        bq: &Tensor,
        wk: &Tensor,
        bk: &Tensor,
        wv: &Tensor,
        bv: &Tensor,
        wo: &Tensor,
        bo: &Tensor,
        heads: usize,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let (n, l, dm) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = dm / heads;
        let flat = tape.reshape(x, &[n * l, dm])?;
        let split = |tape: &mut Tape, w: &Tensor, b: &Tensor| -> Result<Tensor> {
            let y = tape.matmul(&flat, w)?;
            let y = tape.add_bcast(&y, b)?;
            let y = tape.reshape(&y, &[n, l, heads, dh])?;
            let y = tape.permute(&y, &[0, 2, 1, 3])?;
            tape.reshape(&y, &[n * heads, l, dh])
        };
        let q = split(tape, wq, bq)?;
        let k = split(tape, wk, bk)?;
        let v = split(tape, wv, bv)?;
        let kt = tape.permute(&k, &[0, 2, 1])?;
        let scores = tape.batch_matmul(&q, &kt)?;
        let scores = tape.mul_scalar(&scores, 1.0 / (dh as f64).sqrt())?;
        let scores = tape.add(&scores, mask)?;
        let att = tape.softmax(&scores)?;
        let ctx = tape.batch_matmul(&att, &v)?;
        let ctx = tape.reshape(&ctx, &[n, heads, l, dh])?;
        let ctx = tape.permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(&ctx, &[n * l, dm])?;
        let out = tape.matmul(&ctx, wo)?;
        let out = tape.add_bcast(&out, bo)?;
        tape.reshape(&out, &[n, l, dm])
    }

    fn layer_norm_affine(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        g: &Tensor,
        b: &Tensor,
    ) -> Result<Tensor> {
        let y = tape.layer_norm(x)?;
        let y = tape.mul_bcast(&y, g)?;
        tape.add_bcast(&y, b)
    }

    /// Embed token ids: token table lookup + learned positions (+ dropout in
    /// train mode).
    pub fn embed(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &TokenBatch,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let (n, l) = (batch.n, batch.l);
        if l > self.cfg.max_seq_len {
            return Err(Error::Validation(format!(
                "sequence length {l} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        let tok = tape.embedding(bound.get(self.tok_emb)?, &batch.ids, &[n, l])?;
        let pos_full = bound.get(self.pos_emb)?;
        let pos = tape.slice(pos_full, 0, 0, l)?;
        let mut x = tape.add_bcast(&tok, &pos)?;
        if train && self.cfg.dropout_rate > 0.0 {
            x = tape.dropout(&x, self.cfg.dropout_rate, rng)?;
        }
        Ok(x)
    }

    /// One pre-norm encoder block. `layer` is 0-based.
    #[allow(clippy::too_many_arguments)]
    pub fn apply_layer(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Tensor,
        layer: usize,
        mask: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let lp = &self.layers[layer];
        let (n, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.layer_norm_affine(tape, x, bound.get(lp.ln1_g)?, bound.get(lp.ln1_b)?)?;
        let mut att = self.mha(
            tape,
            &h,
            bound.get(lp.wq)?,
            bound.get(lp.bq)?,
            bound.get(lp.wk)?,
            bound.get(lp.bk)?,
            bound.get(lp.wv)?,
            bound.get(lp.bv)?,
            bound.get(lp.wo)?,
            bound.get(lp.bo)?,
            self.cfg.n_heads,
            mask,
        )?;
        if train && self.cfg.dropout_rate > 0.0 {
            att = tape.dropout(&att, self.cfg.dropout_rate, rng)?;
        }
        let x = tape.add(x, &att)?;
        let h2 = self.layer_norm_affine(tape, &x, bound.get(lp.ln2_g)?, bound.get(lp.ln2_b)?)?;
        let flat = tape.reshape(&h2, &[n * l, d])?;
        let f = tape.matmul(&flat, bound.get(lp.w1)?)?;
        let f = tape.add_bcast(&f, bound.get(lp.b1)?)?;
        let f = tape.tanh(&f)?;
        let f = tape.matmul(&f, bound.get(lp.w2)?)?;
        let f = tape.add_bcast(&f, bound.get(lp.b2)?)?;
        let mut f = tape.reshape(&f, &[n, l, d])?;
        if train && self.cfg.dropout_rate > 0.0 {
            f = tape.dropout(&f, self.cfg.dropout_rate, rng)?;
        }
        tape.add(&x, &f)
    }

    /// Hidden states after each of the first `upto` encoder layers
    /// (`H^(1) .. H^(upto)`, each `[n, l, d_model]`). Layers beyond `upto`
    /// are never executed.
    pub fn encode_upto(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &TokenBatch,
        upto: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        if upto == 0 || upto > self.cfg.n_layers {
            return Err(Error::Validation(format!(
                "layer count {upto} out of range 1..={}",
                self.cfg.n_layers
            )));
        }
        let mut x = self.embed(tape, bound, batch, train, rng)?;
        let mask = self.attn_mask(tape, batch, self.cfg.n_heads)?;
        let mut states = Vec::with_capacity(upto);
        for layer in 0..upto {
            x = self.apply_layer(tape, bound, &x, layer, &mask, train, rng)?;
            states.push(x.clone());
        }
        Ok(states)
    }

    /// All per-layer hidden states.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &TokenBatch,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        self.encode_upto(tape, bound, batch, self.cfg.n_layers, train, rng)
    }

    /// Run exit `m` (1-based) on hidden state `h` of shape [n, l, d_model].
    /// Returns the exit representation `h^e` ([n, d_e] for attention exits,
    /// [n, d_model] for linear exits; un-normalized) and logits [n, K].
    pub fn exit_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        m: usize,
        h: &Tensor,
        batch: &TokenBatch,
    ) -> Result<(Tensor, Tensor)> {
        if m == 0 || m > self.cfg.n_layers {
            return Err(Error::Validation(format!(
                "exit {m} out of range 1..={}",
                self.cfg.n_layers
            )));
        }
        let (n, l, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        match &self.exits[m - 1] {
            ExitP::Mha {
                down_w,
                down_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                wc,
                bc,
            } => {
                let de = self.cfg.d_e;
                let flat = tape.reshape(h, &[n * l, d])?;
                let down = tape.matmul(&flat, bound.get(*down_w)?)?;
                let down = tape.add_bcast(&down, bound.get(*down_b)?)?;
                let down = tape.tanh(&down)?;
                let down = tape.reshape(&down, &[n, l, de])?;
                let mask = self.attn_mask(tape, batch, self.cfg.exit_heads)?;
                let att = self.mha(
                    tape,
                    &down,
                    bound.get(*wq)?,
                    bound.get(*bq)?,
                    bound.get(*wk)?,
                    bound.get(*bk)?,
                    bound.get(*wv)?,
                    bound.get(*bv)?,
                    bound.get(*wo)?,
                    bound.get(*bo)?,
                    self.cfg.exit_heads,
                    &mask,
                )?;
                let cls = tape.slice(&att, 1, 0, 1)?;
                let cls = tape.reshape(&cls, &[n, de])?;
                let h_e = tape.tanh(&cls)?;
                let logits = tape.matmul(&h_e, bound.get(*wc)?)?;
                let logits = tape.add_bcast(&logits, bound.get(*bc)?)?;
                Ok((h_e, logits))
            }
            ExitP::Linear { wc, bc } => {
                let cls = tape.slice(h, 1, 0, 1)?;
                let h_e = tape.reshape(&cls, &[n, d])?;
                let logits = tape.matmul(&h_e, bound.get(*wc)?)?;
                let logits = tape.add_bcast(&logits, bound.get(*bc)?)?;
                Ok((h_e, logits))
            }
        }
    }

    /// Copies of exit m's label embeddings (columns of its classifier
    /// matrix), one vector per class. Mutating the result never touches the
    /// classifier.
    pub fn label_embeddings(&self, m: usize) -> Result<Vec<Vec<f64>>> {
        if m == 0 || m > self.cfg.n_layers {
            return Err(Error::Validation(format!("exit {m} out of range")));
        }
        let (wc, _) = self.exits[m - 1].classifier();
        let p = self.params.get(wc);
        let (rows, k) = (p.shape[0], p.shape[1]);
        Ok((0..k)
            .map(|col| (0..rows).map(|r| p.data[r * k + col]).collect())
            .collect())
    }

    /// Exit m's label embeddings as a `[K, width]` tensor on the tape
    /// (transpose of the bound classifier matrix, so gradients flow back
    /// into the classifier).
    pub fn label_embedding_tensor(&self, tape: &mut Tape, bound: &Bound, m: usize) -> Result<Tensor> {
        let (wc, _) = self.exits[m - 1].classifier();
        tape.transpose2(bound.get(wc)?)
    }

    pub fn classifier_pid(&self, m: usize) -> PId {
        self.exits[m - 1].classifier().0
    }

    /// Total parameter count of every exit combined, and of the backbone.
    pub fn param_counts(&self) -> (usize, usize) {
        let mut exits = 0;
        let mut backbone = 0;
        for (_, p) in self.params.iter() {
            match p.owner {
                Owner::Backbone => backbone += p.numel(),
                Owner::Exit(_) => exits += p.numel(),
            }
        }
        (exits, backbone)
    }
}

/// Analytic multiply-accumulate counts (per batch item, at the configured
/// max sequence length) for running the first `m` encoder layers plus exit
/// `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopCount {
    pub encoder_proj: u64,
    /// The L^2 attention terms (scores + context) over `m` layers.
    pub encoder_attn: u64,
    pub encoder_ffn: u64,
    pub exit: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.encoder_proj + self.encoder_attn + self.encoder_ffn + self.exit
    }
}

pub fn count_flops(cfg: &ModelConfig, m: usize) -> Result<FlopCount> {
    if m == 0 || m > cfg.n_layers {
        return Err(Error::Validation(format!(
            "count_flops: layer {m} out of range 1..={}",
            cfg.n_layers
        )));
    }
    let (l, d) = (cfg.max_seq_len as u64, cfg.d_model as u64);
    let m64 = m as u64;
    let proj = m64 * 4 * l * d * d;
    let attn = m64 * 2 * l * l * d;
    let ffn = m64 * 2 * l * d * cfg.d_ff as u64;
    let exit = match cfg.exit_kind {
        ExitKind::Mha => {
            let de = cfg.d_e as u64;
            l * d * de + 4 * l * de * de + 2 * l * l * de + de * cfg.n_classes as u64
        }
        ExitKind::Linear => (cfg.d_model * cfg.n_classes) as u64,
    };
    Ok(FlopCount {
        encoder_proj: proj,
        encoder_attn: attn,
        encoder_ffn: ffn,
        exit,
    })
}
