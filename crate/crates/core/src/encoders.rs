//! Small trainable encoders standing in for the image and text backbones,
//! plus the feature-transform (FT) bank that maps a pooled text feature to
//! one node feature per body region.
//!
//! Every FT is a four-layer fully connected block `D -> D` with ReLU between
//! layers and a single skip connection from input to output. The `N`
//! transforms share this architecture and hold independent parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamRegistry, Tape, Tensor, Var};

/// Layers per feature transform.
pub const FT_DEPTH: usize = 4;

/// Model dimensions shared by data generation and the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Nodes per graph (horizontal image patches / text node features).
    pub n_nodes: usize,
    /// Feature width after projection.
    pub dim: usize,
    /// Width of raw synthetic observations.
    pub dim_in: usize,
    /// Sub-vectors per image patch.
    pub patch_rows: usize,
    /// Word vectors per text sample.
    pub tokens: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            n_nodes: 3,
            dim: 16,
            dim_in: 24,
            patch_rows: 4,
            tokens: 8,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.dim == 0 || self.dim_in == 0 || self.patch_rows == 0 || self.tokens == 0 {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImageSample {
    /// One `K x D_in` block per horizontal patch.
    pub patches: Vec<Tensor>,
    pub stage: Tensor,
    pub identity: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTextSample {
    pub tokens: Tensor,
    pub identity: u32,
}

impl SyntheticImageSample {
    pub fn check(&self, dims: &ModelDims) -> Result<()> {
        if self.patches.len() != dims.n_nodes {
            return Err(Error::Contract(format!(
                "image sample has {} patches, expected {}",
                self.patches.len(),
                dims.n_nodes
            )));
        }
        for p in &self.patches {
            if p.shape() != (dims.patch_rows, dims.dim_in) {
                return Err(Error::dim("image patch", p.shape(), (dims.patch_rows, dims.dim_in)));
            }
        }
        if self.stage.shape() != (1, dims.dim_in) {
            return Err(Error::dim("stage observation", self.stage.shape(), (1, dims.dim_in)));
        }
        Ok(())
    }
}

impl SyntheticTextSample {
    pub fn check(&self, dims: &ModelDims) -> Result<()> {
        if self.tokens.cols() != dims.dim_in {
            return Err(Error::dim("text tokens", self.tokens.shape(), (self.tokens.rows(), dims.dim_in)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtTransform {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtBank {
    pub transforms: Vec<FtTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub image_projection: Tensor,
    pub stage_projection: Tensor,
    pub text_projection: Tensor,
    pub ft_bank: FtBank,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

impl FtTransform {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weights: (0..FT_DEPTH).map(|_| glorot(dim, dim, rng)).collect(),
            biases: (0..FT_DEPTH).map(|_| Tensor::zeros(1, dim)).collect(),
        }
    }

    pub fn zeroed(dim: usize) -> Self {
        Self {
            weights: vec![Tensor::zeros(dim, dim); FT_DEPTH],
            biases: vec![Tensor::zeros(1, dim); FT_DEPTH],
        }
    }
}

impl FtBank {
    pub fn init(n_nodes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            transforms: (0..n_nodes).map(|_| FtTransform::init(dim, rng)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.transforms[0].weights[0].rows()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .transforms
            .first()
            .ok_or_else(|| Error::Contract("empty FT bank".into()))?;
        let d = first.weights.first().map(Tensor::rows).unwrap_or(0);
        for t in &self.transforms {
            if t.weights.len() != FT_DEPTH || t.biases.len() != FT_DEPTH {
                return Err(Error::Contract(format!("every FT needs {FT_DEPTH} layers")));
            }
            for (w, b) in t.weights.iter().zip(&t.biases) {
                if w.shape() != (d, d) {
                    return Err(Error::dim("FT weight", w.shape(), (d, d)));
                }
                if b.shape() != (1, d) {
                    return Err(Error::dim("FT bias", b.shape(), (1, d)));
                }
            }
        }
        Ok(())
    }
}

impl EncoderParams {
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Self {
            image_projection: glorot(dims.dim_in, dims.dim, rng),
            stage_projection: glorot(dims.dim_in, dims.dim, rng),
            text_projection: glorot(dims.dim_in, dims.dim, rng),
            ft_bank: FtBank::init(dims.n_nodes, dims.dim, rng),
        }
    }

    /// Visits every parameter with its stable name.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("encoder.image_projection", &self.image_projection);
        f("encoder.stage_projection", &self.stage_projection);
        f("encoder.text_projection", &self.text_projection);
        for (l, t) in self.ft_bank.transforms.iter().enumerate() {
            for k in 0..FT_DEPTH {
                f(&format!("ft.{l}.weight{k}"), &t.weights[k]);
                f(&format!("ft.{l}.bias{k}"), &t.biases[k]);
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("encoder.image_projection", &mut self.image_projection);
        f("encoder.stage_projection", &mut self.stage_projection);
        f("encoder.text_projection", &mut self.text_projection);
        for (l, t) in self.ft_bank.transforms.iter_mut().enumerate() {
            for k in 0..FT_DEPTH {
                f(&format!("ft.{l}.weight{k}"), &mut t.weights[k]);
                f(&format!("ft.{l}.bias{k}"), &mut t.biases[k]);
            }
        }
    }

    pub fn register(&self, tape: &mut Tape, registry: &mut ParamRegistry, trainable: bool) -> EncoderVars {
        let image_projection = registry.param(tape, "encoder.image_projection", &self.image_projection, trainable);
        let stage_projection = registry.param(tape, "encoder.stage_projection", &self.stage_projection, trainable);
        let text_projection = registry.param(tape, "encoder.text_projection", &self.text_projection, trainable);
        let ft = self
            .ft_bank
            .transforms
            .iter()
            .enumerate()
            .map(|(l, t)| FtVars {
                weights: (0..FT_DEPTH)
                    .map(|k| registry.param(tape, &format!("ft.{l}.weight{k}"), &t.weights[k], trainable))
                    .collect(),
                biases: (0..FT_DEPTH)
                    .map(|k| registry.param(tape, &format!("ft.{l}.bias{k}"), &t.biases[k], trainable))
                    .collect(),
            })
            .collect();
        EncoderVars {
            image_projection,
            stage_projection,
            text_projection,
            ft,
        }
    }

    fn constants(&self, tape: &mut Tape) -> EncoderVars {
        self.register(tape, &mut ParamRegistry::new(), false)
    }
}

#[derive(Debug, Clone)]
pub struct FtVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub image_projection: Var,
    pub stage_projection: Var,
    pub text_projection: Var,
    pub ft: Vec<FtVars>,
}

/// Node-major patch features (slot `l` is `n x D`) and the `n x D` stage features.
pub fn encode_images_batch(
    tape: &mut Tape,
    vars: &EncoderVars,
    images: &[&SyntheticImageSample],
) -> Result<(Vec<Var>, Var)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let n_nodes = first.patches.len();
    let k = first.patches[0].rows();
    let mut nodes = Vec::with_capacity(n_nodes);
    for l in 0..n_nodes {
        let blocks: Vec<&Tensor> = images.iter().map(|s| &s.patches[l]).collect();
        check_uniform(&blocks, "image patch")?;
        let stacked = tape.constant(Tensor::concat_rows(&blocks)?);
        let projected = tape.matmul(stacked, vars.image_projection)?;
        nodes.push(tape.group_max_rows(projected, k)?);
    }
    let stages: Vec<&Tensor> = images.iter().map(|s| &s.stage).collect();
    let stage_in = tape.constant(Tensor::concat_rows(&stages)?);
    let stage = tape.matmul(stage_in, vars.stage_projection)?;
    Ok((nodes, stage))
}

/// Max-pool over every projected sub-vector of the whole image: the single
/// global feature used by the no-graph baseline.
pub fn encode_images_global_batch(
    tape: &mut Tape,
    vars: &EncoderVars,
    images: &[&SyntheticImageSample],
) -> Result<Var> {
    let blocks: Vec<&Tensor> = images.iter().flat_map(|s| s.patches.iter()).collect();
    check_uniform(&blocks, "image patch")?;
    let per_image = images[0].patches.len() * images[0].patches[0].rows();
    let stacked = tape.constant(Tensor::concat_rows(&blocks)?);
    let projected = tape.matmul(stacked, vars.image_projection)?;
    tape.group_max_rows(projected, per_image)
}

/// Projected tokens of every text stacked into one `(n * M) x D` matrix, and `M`.
/// All samples must have the same token count.
pub fn project_texts_batch(tape: &mut Tape, vars: &EncoderVars, texts: &[&SyntheticTextSample]) -> Result<(Var, usize)> {
    let blocks: Vec<&Tensor> = texts.iter().map(|s| &s.tokens).collect();
    if blocks.is_empty() {
        return Err(Error::Contract("empty text batch".into()));
    }
    check_uniform(&blocks, "text tokens")?;
    let m = blocks[0].rows();
    let stacked = tape.constant(Tensor::concat_rows(&blocks)?);
    Ok((tape.matmul(stacked, vars.text_projection)?, m))
}

/// Pooled text features `t_p`, `n x D`.
pub fn encode_texts_batch(tape: &mut Tape, vars: &EncoderVars, texts: &[&SyntheticTextSample]) -> Result<Var> {
    let (projected, m) = project_texts_batch(tape, vars, texts)?;
    tape.group_max_rows(projected, m)
}

/// Node-major text features: slot `l` holds `FT_l` applied to every projected
/// token, max-pooled over each text's tokens.
pub fn encode_text_nodes_batch(tape: &mut Tape, vars: &EncoderVars, texts: &[&SyntheticTextSample]) -> Result<Vec<Var>> {
    let (projected, m) = project_texts_batch(tape, vars, texts)?;
    ft_batch(tape, &vars.ft, projected, m)
}

/// Row-batched FT bank: slot `l` is `FT_l` of every row of `rows`, max-pooled
/// over consecutive groups of `group` rows.
pub fn ft_batch(tape: &mut Tape, ft: &[FtVars], rows: Var, group: usize) -> Result<Vec<Var>> {
    ft.iter()
        .map(|t| {
            let mut h = rows;
            for k in 0..FT_DEPTH {
                h = tape.linear(h, t.weights[k], t.biases[k])?;
                if k + 1 < FT_DEPTH {
                    h = tape.relu(h);
                }
            }
            let out = tape.add(h, rows)?;
            if group == 1 {
                Ok(out)
            } else {
                tape.group_max_rows(out, group)
            }
        })
        .collect()
}

fn check_uniform(blocks: &[&Tensor], what: &'static str) -> Result<()> {
    let first = blocks[0].shape();
    if let Some(bad) = blocks.iter().find(|b| b.shape() != first) {
        return Err(Error::dim(what, first, bad.shape()));
    }
    Ok(())
}

fn check_projection(p: &Tensor, dim_in: usize, op: &'static str) -> Result<()> {
    if p.rows() != dim_in {
        return Err(Error::dim(op, (1, dim_in), p.shape()));
    }
    Ok(())
}

/// Patch features `N x D` and stage feature `1 x D` of one image.
pub fn encode_image(s: &SyntheticImageSample, p: &EncoderParams) -> Result<(Tensor, Tensor)> {
    for patch in &s.patches {
        check_projection(&p.image_projection, patch.cols(), "encode_image")?;
    }
    check_projection(&p.stage_projection, s.stage.cols(), "encode_image")?;
    let mut tape = Tape::new();
    let vars = p.constants(&mut tape);
    let (nodes, stage) = encode_images_batch(&mut tape, &vars, &[s])?;
    let rows: Vec<&Tensor> = nodes.iter().map(|&v| tape.value(v)).collect();
    Ok((Tensor::concat_rows(&rows)?, tape.value(stage).clone()))
}

/// Pooled global text feature `1 x D`.
pub fn encode_text(s: &SyntheticTextSample, p: &EncoderParams) -> Result<Tensor> {
    check_projection(&p.text_projection, s.tokens.cols(), "encode_text")?;
    let mut tape = Tape::new();
    let vars = p.constants(&mut tape);
    let t = encode_texts_batch(&mut tape, &vars, &[s])?;
    Ok(tape.value(t).clone())
}

/// Projected tokens `M x D` of one text, before pooling.
pub fn encode_text_tokens(s: &SyntheticTextSample, p: &EncoderParams) -> Result<Tensor> {
    check_projection(&p.text_projection, s.tokens.cols(), "encode_text_tokens")?;
    s.tokens.matmul(&p.text_projection)
}

/// Text node features `N x D`: row `l` is `FT_l` of every row of `features`,
/// max-pooled over rows. A single row gives `FT_l(row)` directly.
pub fn ft_transform(features: &Tensor, bank: &FtBank) -> Result<Tensor> {
    bank.validate()?;
    if features.rows() == 0 || features.cols() != bank.dim() {
        return Err(Error::dim("ft_transform", features.shape(), (1, bank.dim())));
    }
    let mut tape = Tape::new();
    let mut registry = ParamRegistry::new();
    let ft: Vec<FtVars> = bank
        .transforms
        .iter()
        .map(|t| FtVars {
            weights: t.weights.iter().map(|w| registry.param(&mut tape, "", w, false)).collect(),
            biases: t.biases.iter().map(|b| registry.param(&mut tape, "", b, false)).collect(),
        })
        .collect();
    let g = tape.constant(features.clone());
    let rows = ft_batch(&mut tape, &ft, g, features.rows())?;
    let values: Vec<&Tensor> = rows.iter().map(|&v| tape.value(v)).collect();
    Tensor::concat_rows(&values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn small_params(dim_in: usize, dim: usize, n: usize, rng: &mut ChaCha8Rng) -> EncoderParams {
        EncoderParams::init(
            &ModelDims {
                n_nodes: n,
                dim,
                dim_in,
                patch_rows: 1,
                tokens: 1,
            },
            rng,
        )
    }

    #[test]
    fn single_row_patch_pooling_is_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = small_params(3, 2, 2, &mut rng);
        let s = SyntheticImageSample {
            patches: vec![random(1, 3, &mut rng), random(1, 3, &mut rng)],
            stage: random(1, 3, &mut rng),
            identity: 0,
        };
        let (nodes, stage) = encode_image(&s, &p).unwrap();
        for l in 0..2 {
            let direct = s.patches[l].matmul(&p.image_projection).unwrap();
            assert!(direct.max_abs_diff(&nodes.slice_rows(l, 1).unwrap()) < 1e-15);
        }
        assert!(stage.max_abs_diff(&s.stage.matmul(&p.stage_projection).unwrap()) < 1e-15);

        let dup = SyntheticImageSample {
            patches: s
                .patches
                .iter()
                .map(|r| Tensor::concat_rows(&[r, r, r]).unwrap())
                .collect(),
            ..s.clone()
        };
        assert_eq!(encode_image(&dup, &p).unwrap().0, nodes);
    }

    #[test]
    fn image_encoding_matches_scalar_loops() {
        let proj = Tensor::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap();
        let patch = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let mut expected = [f64::NEG_INFINITY; 2];
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += patch.get(r, k) * proj.get(k, c);
                }
                expected[c] = expected[c].max(acc);
            }
        }
        // rows project to [2, 3] and [2.5, -5]
        assert_eq!(expected, [2.5, 3.0]);
        let mut p = small_params(2, 2, 1, &mut ChaCha8Rng::seed_from_u64(0));
        p.image_projection = proj.clone();
        let s = SyntheticImageSample {
            patches: vec![patch],
            stage: Tensor::zeros(1, 2),
            identity: 0,
        };
        let (nodes, _) = encode_image(&s, &p).unwrap();
        assert!((nodes.get(0, 0) - expected[0]).abs() < 1e-12);
        assert!((nodes.get(0, 1) - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn text_encoding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = small_params(3, 4, 1, &mut rng);
        let tok = random(1, 3, &mut rng);
        let single = SyntheticTextSample { tokens: tok.clone(), identity: 0 };
        assert!(encode_text(&single, &p)
            .unwrap()
            .max_abs_diff(&tok.matmul(&p.text_projection).unwrap())
            < 1e-15);

        let tokens = random(5, 3, &mut rng);
        let rev: Vec<&[f64]> = (0..5).rev().map(|r| tokens.row(r)).collect();
        let a = encode_text(&SyntheticTextSample { tokens: tokens.clone(), identity: 0 }, &p).unwrap();
        let b = encode_text(&SyntheticTextSample { tokens: Tensor::from_rows(&rev).unwrap(), identity: 0 }, &p).unwrap();
        assert_eq!(a, b);

        let projected = tokens.matmul(&p.text_projection).unwrap();
        for c in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for r in 0..5 {
                best = best.max(projected.get(r, c));
            }
            assert!((a.get(0, c) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = small_params(3, 4, 1, &mut rng);
        let bad = SyntheticTextSample { tokens: Tensor::zeros(2, 5), identity: 0 };
        assert!(matches!(encode_text(&bad, &p), Err(Error::Dimension { .. })));
        assert!(matches!(
            ft_transform(&Tensor::zeros(1, 3), &p.ft_bank),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zeroed_ft_is_identity() {
        let bank = FtBank {
            transforms: vec![FtTransform::zeroed(3); 4],
        };
        let g = Tensor::row_vector(vec![0.5, -1.0, 2.0]).unwrap();
        let out = ft_transform(&g, &bank).unwrap();
        assert_eq!(out, g.repeat_rows(4).unwrap());
    }

    #[test]
    fn ft_rows_follow_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = FtBank::init(3, 5, &mut rng);
        let g = random(1, 5, &mut rng);
        let a = ft_transform(&g, &bank).unwrap();
        assert_eq!(a, ft_transform(&g, &bank.clone()).unwrap());
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(a.row(i), a.row(j));
            }
        }
    }

    #[test]
    fn output_shapes_ignore_k_and_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = small_params(3, 4, 2, &mut rng);
        for k in 1..5 {
            let s = SyntheticImageSample {
                patches: vec![random(k, 3, &mut rng), random(k, 3, &mut rng)],
                stage: random(1, 3, &mut rng),
                identity: 0,
            };
            assert_eq!(encode_image(&s, &p).unwrap().0.shape(), (2, 4));
            let t = SyntheticTextSample { tokens: random(k, 3, &mut rng), identity: 0 };
            assert_eq!(encode_text(&t, &p).unwrap().shape(), (1, 4));
        }
    }
}
