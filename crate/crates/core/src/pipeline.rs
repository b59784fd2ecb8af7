//! The three training stages plus the no-graph baseline, and the checkpoint
//! bundle that carries parameters between them.
//!
//! - Stage I trains the encoders, FT bank and clean GCN.
//! - Stage II freezes the model and learns one attack node per modality by
//!   gradient ascent.
//! - Stage III freezes the attack nodes and trains the encoders and the
//!   attack-branch GCN on attacked graphs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::data::{sample_batch, Batch, DatasetFile};
use crate::encoders::{
    encode_images_batch, encode_images_global_batch, encode_texts_batch, ft_batch, project_texts_batch, EncoderParams, EncoderVars,
    FtBank, FtTransform, ModelDims,
};
use crate::error::{Error, Result};
use crate::graph::{attacked_gcn_node_major, build_adjacency, gcn_forward_node_major, AttackNode, GcnParams};
use crate::losses::{
    adversarial_cmpm_tape, attack_objective_tape, cmpm_bidirectional_tape, cmpm_global_tape, cmpm_node_tape,
    total_adversarial_loss_tape, LossWeights, MatchLabels,
};
use crate::numcore::tensor::{read_exact, read_u32};
use crate::numcore::{Direction, NamedAdam, ParamRegistry, Tape, Tensor, Var};
use crate::Modality;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XAGC";

/// Standard deviation of the initial attack-node entries.
pub const ATTACK_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageTag {
    /// Encoders only, global max-pooled features, no graph.
    Baseline,
    /// Stage I.
    Scfc,
    /// Stage II.
    Attack,
    /// Stage III.
    Adversarial,
}

impl StageTag {
    pub const ALL: [StageTag; 4] = [StageTag::Baseline, StageTag::Scfc, StageTag::Attack, StageTag::Adversarial];

    pub fn code(self) -> u8 {
        match self {
            StageTag::Baseline => 0,
            StageTag::Scfc => 1,
            StageTag::Attack => 2,
            StageTag::Adversarial => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        StageTag::ALL.into_iter().find(|s| s.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Baseline => "baseline",
            StageTag::Scfc => "stage1",
            StageTag::Attack => "stage2",
            StageTag::Adversarial => "stage3",
        }
    }

    /// The stage whose bundle this stage starts from.
    pub fn parent(self) -> Option<Self> {
        match self {
            StageTag::Baseline | StageTag::Scfc => None,
            StageTag::Attack => Some(StageTag::Scfc),
            StageTag::Adversarial => Some(StageTag::Attack),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: StageTag,
    pub iterations: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
    pub dims: ModelDims,
    pub gcn_layers: usize,
    pub config_hash: [u8; 32],
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(format!("{} needs at least one iteration", self.stage.name())));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{} learning rate must be > 0", self.stage.name())));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()?;
        self.dims.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackNodes {
    pub image: AttackNode,
    pub text: AttackNode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub stage: StageTag,
    pub config_hash: [u8; 32],
    pub encoder: EncoderParams,
    pub gcn: GcnParams,
    /// Attack-branch GCN weights; present from stage III on.
    pub gcn_attack: Option<GcnParams>,
    /// Present from stage II on.
    pub attack: Option<AttackNodes>,
    pub rng: ChaCha8Rng,
}

/// One history row; `None` marks a loss the stage does not compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub node: Option<f64>,
    pub global: Option<f64>,
    pub attack: Option<f64>,
    pub adversarial: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub const HEADER: &'static str = "iter,loss_eq4,loss_eq6,loss_eq14,loss_eq17";

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iter,
                cell(r.node),
                cell(r.global),
                cell(r.attack),
                cell(r.adversarial)
            );
        }
        out
    }

    pub fn column(&self, f: impl Fn(&HistoryRow) -> Option<f64>) -> Vec<f64> {
        self.rows.iter().filter_map(f).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bundle: CheckpointBundle,
    pub history: History,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn check_dataset(ds: &DatasetFile, dims: &ModelDims) -> Result<()> {
    if ds.dims.n_nodes != dims.n_nodes || ds.dims.dim_in != dims.dim_in {
        return Err(Error::Config(format!(
            "dataset has N={} D_in={}, model expects N={} D_in={}",
            ds.dims.n_nodes, ds.dims.dim_in, dims.n_nodes, dims.dim_in
        )));
    }
    if ds.images.is_empty() || ds.texts.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    Ok(())
}

fn check_bundle_dims(b: &CheckpointBundle, dims: &ModelDims) -> Result<()> {
    let enc = &b.encoder;
    if enc.image_projection.shape() != (dims.dim_in, dims.dim) || enc.ft_bank.transforms.len() != dims.n_nodes {
        return Err(Error::Config("checkpoint dimensions do not match the configuration".into()));
    }
    Ok(())
}

fn require_parent(parent: &CheckpointBundle, cfg: &StageConfig) -> Result<()> {
    let expected = cfg.stage.parent().expect("stage with a parent");
    if parent.stage != expected {
        return Err(Error::State(format!(
            "{} needs a {} checkpoint, got {}",
            cfg.stage.name(),
            expected.name(),
            parent.stage.name()
        )));
    }
    if parent.config_hash != cfg.config_hash {
        return Err(Error::Integrity("parent checkpoint was produced by a different configuration".into()));
    }
    check_bundle_dims(parent, &cfg.dims)
}

fn stage_rng(seed: u64, stage: StageTag) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(stage.code()) + 1);
    rng
}

fn update_encoder(opt: &mut NamedAdam, enc: &mut EncoderParams, reg: &ParamRegistry, grads: &crate::numcore::Gradients) -> Result<()> {
    let mut result = Ok(());
    enc.for_each_mut(|name, p| {
        if result.is_ok() {
            result = opt.update(name, p, reg, grads);
        }
    });
    result
}

fn gcn_vars(tape: &mut Tape, reg: &mut ParamRegistry, prefix: &str, gcn: &GcnParams, trainable: bool) -> Vec<Var> {
    gcn.layers()
        .iter()
        .enumerate()
        .map(|(k, w)| reg.param(tape, &format!("{prefix}.weight{k}"), w, trainable))
        .collect()
}

fn update_gcn(opt: &mut NamedAdam, prefix: &str, gcn: &mut GcnParams, reg: &ParamRegistry, grads: &crate::numcore::Gradients) -> Result<()> {
    for (k, w) in gcn.layers_mut().iter_mut().enumerate() {
        opt.update(&format!("{prefix}.weight{k}"), w, reg, grads)?;
    }
    Ok(())
}

struct Encoded {
    image_nodes: Vec<Var>,
    image_stage: Var,
    text_pooled: Var,
    text_nodes: Vec<Var>,
}

fn encode_batch(tape: &mut Tape, vars: &EncoderVars, ds: &DatasetFile, batch: &Batch) -> Result<Encoded> {
    let (image_nodes, image_stage) = encode_images_batch(tape, vars, &batch.images(ds))?;
    let (tokens, m) = project_texts_batch(tape, vars, &batch.texts(ds))?;
    let text_pooled = tape.group_max_rows(tokens, m)?;
    let text_nodes = ft_batch(tape, &vars.ft, tokens, m)?;
    Ok(Encoded {
        image_nodes,
        image_stage,
        text_pooled,
        text_nodes,
    })
}

/// No-graph baseline: max-pooled image feature against pooled text feature,
/// trained with bidirectional CMPM.
pub fn train_baseline(cfg: &StageConfig, train: &DatasetFile) -> Result<TrainOutput> {
    cfg.validate()?;
    check_dataset(train, &cfg.dims)?;
    let mut rng = stage_rng(cfg.seed, StageTag::Baseline);
    let mut encoder = EncoderParams::init(&cfg.dims, &mut rng);
    let gcn = GcnParams::init(cfg.dims.dim, cfg.gcn_layers, &mut rng)?;
    let batch_size = cfg.batch_size.min(train.images.len());
    let mut opt = NamedAdam::new(cfg.lr, Direction::Descend);
    let mut history = History::default();
    for iter in 1..=cfg.iterations {
        let batch = sample_batch(train, batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = encoder.register(&mut tape, &mut reg, true);
        let image = encode_images_global_batch(&mut tape, &vars, &batch.images(train))?;
        let text = encode_texts_batch(&mut tape, &vars, &batch.texts(train))?;
        let loss = cmpm_bidirectional_tape(&mut tape, image, text, &batch.labels, cfg.weights.epsilon)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        update_encoder(&mut opt, &mut encoder, &reg, &grads)?;
        history.rows.push(HistoryRow {
            iter,
            node: None,
            global: Some(value),
            attack: None,
            adversarial: None,
        });
        log_progress("baseline", iter, cfg.iterations, value);
    }
    Ok(TrainOutput {
        bundle: CheckpointBundle {
            stage: StageTag::Baseline,
            config_hash: cfg.config_hash,
            encoder,
            gcn,
            gcn_attack: None,
            attack: None,
            rng,
        },
        history,
    })
}

fn log_progress(stage: &str, iter: usize, total: usize, value: f64) {
    if iter == 1 || iter == total || iter.is_multiple_of(100) {
        info!("{stage} iter {iter}/{total} loss {value:.6}");
    } else {
        debug!("{stage} iter {iter}/{total} loss {value:.6}");
    }
}

/// Stage I: per batch, one descent step on the node-level CMPM over the
/// pre-convolution node features (encoders and FT bank), then one on the
/// global CMPM over the clean-convolved concatenated features (encoders, FT
/// bank and GCN).
pub fn train_stage1(cfg: &StageConfig, train: &DatasetFile) -> Result<TrainOutput> {
    if cfg.stage != StageTag::Scfc {
        return Err(Error::State(format!("train_stage1 given a {} config", cfg.stage.name())));
    }
    cfg.validate()?;
    check_dataset(train, &cfg.dims)?;
    let mut rng = stage_rng(cfg.seed, StageTag::Scfc);
    let mut encoder = EncoderParams::init(&cfg.dims, &mut rng);
    let mut gcn = GcnParams::init(cfg.dims.dim, cfg.gcn_layers, &mut rng)?;
    let adjacency = build_adjacency(cfg.dims.n_nodes)?;
    let batch_size = cfg.batch_size.min(train.images.len());
    let eps = cfg.weights.epsilon;
    let mut node_opt = NamedAdam::new(cfg.lr, Direction::Descend);
    let mut global_opt = NamedAdam::new(cfg.lr, Direction::Descend);
    let mut history = History::default();

    for iter in 1..=cfg.iterations {
        let batch = sample_batch(train, batch_size, &mut rng)?;

        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = encoder.register(&mut tape, &mut reg, true);
        let enc = encode_batch(&mut tape, &vars, train, &batch)?;
        let node_loss = cmpm_node_tape(&mut tape, &enc.image_nodes, &enc.text_nodes, &batch.labels, eps)?;
        let node_value = tape.value(node_loss).item();
        let grads = tape.backward(node_loss)?;
        update_encoder(&mut node_opt, &mut encoder, &reg, &grads)?;

        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = encoder.register(&mut tape, &mut reg, true);
        let weights = gcn_vars(&mut tape, &mut reg, "gcn", &gcn, true);
        let enc = encode_batch(&mut tape, &vars, train, &batch)?;
        let gv = gcn_forward_node_major(&mut tape, &enc.image_nodes, &adjacency, &weights)?;
        let gt = gcn_forward_node_major(&mut tape, &enc.text_nodes, &adjacency, &weights)?;
        let gv = tape.concat_cols(&gv)?;
        let gt = tape.concat_cols(&gt)?;
        let global_loss = cmpm_global_tape(&mut tape, gv, gt, &batch.labels, eps)?;
        let global_value = tape.value(global_loss).item();
        let grads = tape.backward(global_loss)?;
        update_encoder(&mut global_opt, &mut encoder, &reg, &grads)?;
        update_gcn(&mut global_opt, "gcn", &mut gcn, &reg, &grads)?;

        history.rows.push(HistoryRow {
            iter,
            node: Some(node_value),
            global: Some(global_value),
            attack: None,
            adversarial: None,
        });
        log_progress("stage1", iter, cfg.iterations, node_value + global_value);
    }
    Ok(TrainOutput {
        bundle: CheckpointBundle {
            stage: StageTag::Scfc,
            config_hash: cfg.config_hash,
            encoder,
            gcn,
            gcn_attack: None,
            attack: None,
            rng,
        },
        history,
    })
}

/// Every training image paired with a same-identity text; the fixed set the
/// attack nodes are learned on.
pub fn attack_pairs(train: &DatasetFile, rng: &mut impl Rng) -> Result<Batch> {
    let mut texts_by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, t) in train.texts.iter().enumerate() {
        texts_by_id.entry(t.identity).or_default().push(i);
    }
    let image_indices: Vec<usize> = (0..train.images.len()).collect();
    let mut text_indices = Vec::with_capacity(image_indices.len());
    for img in &train.images {
        let pool = texts_by_id
            .get(&img.identity)
            .ok_or_else(|| Error::Contract(format!("identity {} has no text", img.identity)))?;
        text_indices.push(pool[rng.random_range(0..pool.len())]);
    }
    let image_ids: Vec<u32> = train.images.iter().map(|s| s.identity).collect();
    let text_ids: Vec<u32> = text_indices.iter().map(|&i| train.texts[i].identity).collect();
    Ok(Batch {
        labels: MatchLabels::from_identities(&image_ids, &text_ids)?,
        image_indices,
        text_indices,
    })
}

/// Frozen pre-convolution node features for a batch, as plain tensors.
fn frozen_nodes(encoder: &EncoderParams, ds: &DatasetFile, batch: &Batch) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = encoder.register(&mut tape, &mut ParamRegistry::new(), false);
    let enc = encode_batch(&mut tape, &vars, ds, batch)?;
    let values = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
    Ok((values(&enc.image_nodes), values(&enc.text_nodes)))
}

/// Attack objective of `attack` against frozen node features, with gradients
/// for both attack vectors.
pub fn attack_objective_with_grads(
    image_nodes: &[Tensor],
    text_nodes: &[Tensor],
    gcn: &GcnParams,
    attack: &AttackNodes,
    labels: &MatchLabels,
    eps: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let n_nodes = image_nodes.len();
    let adjacency = build_adjacency(n_nodes)?;
    let mut tape = Tape::new();
    let weights: Vec<Var> = gcn.layers().iter().map(|w| tape.constant(w.clone())).collect();
    let iv: Vec<Var> = image_nodes.iter().map(|t| tape.constant(t.clone())).collect();
    let tv: Vec<Var> = text_nodes.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.leaf(attack.image.vector.clone());
    let xt = tape.leaf(attack.text.vector.clone());
    let av = attacked_gcn_node_major(&mut tape, &iv, xv, &adjacency, &weights)?;
    let at = attacked_gcn_node_major(&mut tape, &tv, xt, &adjacency, &weights)?;
    let obj = attack_objective_tape(&mut tape, &av, &at, labels, eps)?;
    let grads = tape.backward(obj)?;
    let gv = grads.get_or_zeros(xv, &attack.image.vector);
    let gt = grads.get_or_zeros(xt, &attack.text.vector);
    Ok((tape.value(obj).item(), gv, gt))
}

/// Stage II: the model is frozen; the two attack vectors climb the attack
/// objective on the full training split. Row `k` of the history holds the
/// objective at the start of iteration `k`; the final row holds the value
/// after the last step.
pub fn train_stage2(cfg: &StageConfig, train: &DatasetFile, parent: &CheckpointBundle) -> Result<TrainOutput> {
    if cfg.stage != StageTag::Attack {
        return Err(Error::State(format!("train_stage2 given a {} config", cfg.stage.name())));
    }
    require_parent(parent, cfg)?;
    cfg.validate()?;
    check_dataset(train, &cfg.dims)?;
    let mut rng = parent.rng.clone();
    let dim = cfg.dims.dim;
    let draw = |rng: &mut ChaCha8Rng| {
        Tensor::from_fn(1, dim, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            ATTACK_INIT_SCALE * z
        })
    };
    let mut attack = AttackNodes {
        image: AttackNode::new(Modality::Image, draw(&mut rng))?,
        text: AttackNode::new(Modality::Text, draw(&mut rng))?,
    };
    let pairs = attack_pairs(train, &mut rng)?;
    let (image_nodes, text_nodes) = frozen_nodes(&parent.encoder, train, &pairs)?;
    let eps = cfg.weights.epsilon;

    let mut states = [
        crate::numcore::AdamState::new((1, dim), cfg.lr),
        crate::numcore::AdamState::new((1, dim), cfg.lr),
    ];
    let mut history = History::default();
    for iter in 1..=cfg.iterations + 1 {
        let (value, gv, gt) =
            attack_objective_with_grads(&image_nodes, &text_nodes, &parent.gcn, &attack, &pairs.labels, eps)?;
        history.rows.push(HistoryRow {
            iter,
            node: None,
            global: None,
            attack: Some(value),
            adversarial: None,
        });
        if iter > cfg.iterations {
            break;
        }
        crate::numcore::adam_step(&mut attack.image.vector, &gv, &mut states[0], Direction::Ascend)?;
        crate::numcore::adam_step(&mut attack.text.vector, &gt, &mut states[1], Direction::Ascend)?;
        log_progress("stage2", iter, cfg.iterations, value);
    }
    Ok(TrainOutput {
        bundle: CheckpointBundle {
            stage: StageTag::Attack,
            config_hash: cfg.config_hash,
            encoder: parent.encoder.clone(),
            gcn: parent.gcn.clone(),
            gcn_attack: None,
            attack: Some(attack),
            rng,
        },
        history,
    })
}

/// Stage III: attack nodes frozen; descent on stage-feature CMPM plus
/// weighted node-level CMPM plus weighted adversarial CMPM over attacked
/// graphs convolved with the attack-branch weights.
pub fn train_stage3(cfg: &StageConfig, train: &DatasetFile, parent: &CheckpointBundle) -> Result<TrainOutput> {
    if cfg.stage != StageTag::Adversarial {
        return Err(Error::State(format!("train_stage3 given a {} config", cfg.stage.name())));
    }
    require_parent(parent, cfg)?;
    cfg.validate()?;
    check_dataset(train, &cfg.dims)?;
    let attack = parent
        .attack
        .clone()
        .ok_or_else(|| Error::State("stage III needs learned attack nodes".into()))?;
    let mut rng = parent.rng.clone();
    let mut encoder = parent.encoder.clone();
    let mut gcn_attack = parent.gcn.clone();
    let adjacency = build_adjacency(cfg.dims.n_nodes)?;
    let batch_size = cfg.batch_size.min(train.images.len());
    let eps = cfg.weights.epsilon;
    let mut opt = NamedAdam::new(cfg.lr, Direction::Descend);
    let mut history = History::default();

    for iter in 1..=cfg.iterations {
        let batch = sample_batch(train, batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = encoder.register(&mut tape, &mut reg, true);
        let weights = gcn_vars(&mut tape, &mut reg, "gcn_attack", &gcn_attack, true);
        let xv = tape.constant(attack.image.vector.clone());
        let xt = tape.constant(attack.text.vector.clone());
        let enc = encode_batch(&mut tape, &vars, train, &batch)?;
        let stage = cmpm_bidirectional_tape(&mut tape, enc.image_stage, enc.text_pooled, &batch.labels, eps)?;
        let node = cmpm_node_tape(&mut tape, &enc.image_nodes, &enc.text_nodes, &batch.labels, eps)?;
        let pv = attacked_gcn_node_major(&mut tape, &enc.image_nodes, xv, &adjacency, &weights)?;
        let pt = attacked_gcn_node_major(&mut tape, &enc.text_nodes, xt, &adjacency, &weights)?;
        let pv = tape.concat_cols(&pv)?;
        let pt = tape.concat_cols(&pt)?;
        let adv = adversarial_cmpm_tape(&mut tape, pv, pt, &batch.labels, eps)?;
        let total = total_adversarial_loss_tape(&mut tape, stage, node, adv, &cfg.weights)?;
        let node_value = tape.value(node).item();
        let value = tape.value(total).item();
        let grads = tape.backward(total)?;
        update_encoder(&mut opt, &mut encoder, &reg, &grads)?;
        update_gcn(&mut opt, "gcn_attack", &mut gcn_attack, &reg, &grads)?;
        history.rows.push(HistoryRow {
            iter,
            node: Some(node_value),
            global: None,
            attack: None,
            adversarial: Some(value),
        });
        log_progress("stage3", iter, cfg.iterations, value);
    }
    Ok(TrainOutput {
        bundle: CheckpointBundle {
            stage: StageTag::Adversarial,
            config_hash: cfg.config_hash,
            encoder,
            gcn: parent.gcn.clone(),
            gcn_attack: Some(gcn_attack),
            attack: Some(attack),
            rng,
        },
        history,
    })
}

const RNG_BLOCK: &str = "rng.state";

/// 32-byte seed, 64-bit stream and 128-bit word position as exact 32-bit
/// chunks stored in f64 entries.
fn rng_to_tensor(rng: &ChaCha8Rng) -> Tensor {
    let mut words: Vec<u32> = rng
        .get_seed()
        .chunks(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let stream = rng.get_stream();
    words.extend([stream as u32, (stream >> 32) as u32]);
    let pos = rng.get_word_pos();
    words.extend((0..4).map(|k| (pos >> (32 * k)) as u32));
    Tensor::row_vector(words.into_iter().map(f64::from).collect()).expect("nonempty")
}

fn rng_from_tensor(t: &Tensor) -> Result<ChaCha8Rng> {
    if t.shape() != (1, 14) {
        return Err(Error::Integrity(format!("rng block has shape {:?}", t.shape())));
    }
    let mut words = Vec::with_capacity(14);
    for &v in t.data() {
        if !(0.0..=f64::from(u32::MAX)).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Integrity("rng block holds a non-integer word".into()));
        }
        words.push(v as u32);
    }
    let mut seed = [0u8; 32];
    for (k, w) in words[..8].iter().enumerate() {
        seed[4 * k..4 * k + 4].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from(words[8]) | (u64::from(words[9]) << 32));
    let pos = (0..4).fold(0u128, |acc, k| acc | (u128::from(words[10 + k]) << (32 * k)));
    rng.set_word_pos(pos);
    Ok(rng)
}

impl CheckpointBundle {
    /// Named parameter blocks in file order.
    pub fn blocks(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.for_each(|name, t| out.push((name.to_string(), t.clone())));
        for (k, w) in self.gcn.layers().iter().enumerate() {
            out.push((format!("gcn.weight{k}"), w.clone()));
        }
        if let Some(g) = &self.gcn_attack {
            for (k, w) in g.layers().iter().enumerate() {
                out.push((format!("gcn_attack.weight{k}"), w.clone()));
            }
        }
        if let Some(a) = &self.attack {
            out.push(("attack.image".into(), a.image.vector.clone()));
            out.push(("attack.text".into(), a.text.vector.clone()));
        }
        out.push((RNG_BLOCK.into(), rng_to_tensor(&self.rng)));
        out
    }

    /// SHA-256 of one named block's serialized tensor.
    pub fn block_digest(&self, name: &str) -> Option<[u8; 32]> {
        self.blocks()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| Sha256::digest(t.to_bytes()).into())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[self.stage.code()])?;
        w.write_all(&self.config_hash)?;
        let blocks = self.blocks();
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, t) in &blocks {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest_hex(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("bad checkpoint magic".into()));
        }
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag)?;
        let stage =
            StageTag::from_code(tag[0]).ok_or_else(|| Error::Integrity(format!("unknown stage tag {}", tag[0])))?;
        let mut config_hash = [0u8; 32];
        read_exact(r, &mut config_hash)?;
        let count = read_u32(r)? as usize;
        if count > 1 << 16 {
            return Err(Error::Integrity("implausible block count".into()));
        }
        let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Integrity("block name is not UTF-8".into()))?;
            let t = Tensor::read_from(r)?;
            if blocks.insert(name.clone(), t).is_some() {
                return Err(Error::Integrity(format!("duplicate block {name}")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Integrity("trailing bytes after checkpoint".into()));
        }
        Self::from_blocks(stage, config_hash, blocks)
    }

    fn from_blocks(stage: StageTag, config_hash: [u8; 32], mut blocks: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut n_nodes = 0;
        while blocks.contains_key(&format!("ft.{n_nodes}.weight0")) {
            n_nodes += 1;
        }
        if n_nodes == 0 {
            return Err(Error::Integrity("checkpoint has no FT blocks".into()));
        }
        let (dim_in, dim) = blocks
            .get("encoder.image_projection")
            .map(Tensor::shape)
            .ok_or_else(|| Error::Integrity("checkpoint lacks block encoder.image_projection".into()))?;
        let mut encoder = EncoderParams {
            image_projection: Tensor::zeros(dim_in, dim),
            stage_projection: Tensor::zeros(dim_in, dim),
            text_projection: Tensor::zeros(dim_in, dim),
            ft_bank: FtBank {
                transforms: (0..n_nodes).map(|_| FtTransform::zeroed(dim)).collect(),
            },
        };
        let mut fill_err = None;
        encoder.for_each_mut(|name, slot| {
            if fill_err.is_some() {
                return;
            }
            match take_block(&mut blocks, name) {
                Ok(t) if t.shape() == slot.shape() => *slot = t,
                Ok(t) => fill_err = Some(Error::Integrity(format!("block {name} has shape {:?}", t.shape()))),
                Err(e) => fill_err = Some(e),
            }
        });
        if let Some(e) = fill_err {
            return Err(e);
        }
        let gcn = take_gcn(&mut blocks, "gcn")?.ok_or_else(|| Error::Integrity("checkpoint lacks gcn weights".into()))?;
        let gcn_attack = take_gcn(&mut blocks, "gcn_attack")?;
        let attack = match (blocks.remove("attack.image"), blocks.remove("attack.text")) {
            (Some(v), Some(t)) => Some(AttackNodes {
                image: AttackNode::new(Modality::Image, v).map_err(|e| Error::Integrity(e.to_string()))?,
                text: AttackNode::new(Modality::Text, t).map_err(|e| Error::Integrity(e.to_string()))?,
            }),
            (None, None) => None,
            _ => return Err(Error::Integrity("checkpoint holds only one attack node".into())),
        };
        let rng = rng_from_tensor(&take_block(&mut blocks, RNG_BLOCK)?)?;
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Integrity(format!("unexpected block {extra}")));
        }
        for w in gcn.layers().iter().chain(gcn_attack.iter().flat_map(|g| g.layers())) {
            if w.shape() != (dim, dim) {
                return Err(Error::Integrity("gcn weights do not match the feature width".into()));
            }
        }
        if let Some(a) = &attack {
            if a.image.vector.cols() != dim || a.text.vector.cols() != dim {
                return Err(Error::Integrity("attack nodes do not match the feature width".into()));
            }
        }
        let expects_attack = stage >= StageTag::Attack;
        let expects_attack_gcn = stage == StageTag::Adversarial;
        if attack.is_some() != expects_attack || gcn_attack.is_some() != expects_attack_gcn {
            return Err(Error::Integrity(format!("blocks inconsistent with stage {}", stage.name())));
        }
        Ok(Self {
            stage,
            config_hash,
            encoder,
            gcn,
            gcn_attack,
            attack,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads and verifies the config hash and, when given, the stage tag.
    pub fn load(path: &Path, config_hash: &[u8; 32], stage: Option<StageTag>) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::State(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let bundle = Self::read_from(&mut bytes.as_slice())?;
        if &bundle.config_hash != config_hash {
            return Err(Error::Integrity(format!(
                "checkpoint {} was produced by a different configuration",
                path.display()
            )));
        }
        if let Some(expected) = stage {
            if bundle.stage != expected {
                return Err(Error::State(format!(
                    "expected a {} checkpoint, {} holds {}",
                    expected.name(),
                    path.display(),
                    bundle.stage.name()
                )));
            }
        }
        Ok(bundle)
    }

    pub fn dims_match(&self, dims: &ModelDims) -> bool {
        check_bundle_dims(self, dims).is_ok()
    }
}

fn take_block(blocks: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    blocks
        .remove(name)
        .ok_or_else(|| Error::Integrity(format!("checkpoint lacks block {name}")))
}

fn take_gcn(blocks: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<Option<GcnParams>> {
    let mut layers = Vec::new();
    while let Some(w) = blocks.remove(&format!("{prefix}.weight{}", layers.len())) {
        layers.push(w);
    }
    if layers.is_empty() {
        return Ok(None);
    }
    GcnParams::new(layers).map(Some).map_err(|e| Error::Integrity(e.to_string()))
}
