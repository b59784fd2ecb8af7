//! Synthetic cross-modal data where within-identity diversity is a
//! controllable perturbation.
//!
//! Each identity owns one prototype per body region. An image observes every
//! region through `K` noisy sub-vectors; its stage observation is the noisy
//! mean of the prototypes. A text is `M` tokens, token `m` describing region
//! `m mod N` blended with the next region by a random weight in
//! `[0, text_mixing]`, plus noise.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoders::{ModelDims, SyntheticImageSample, SyntheticTextSample};
use crate::error::{Error, Result};
use crate::losses::MatchLabels;
use crate::numcore::tensor::{read_exact, read_u32};
use crate::numcore::Tensor;
use crate::Modality;

pub const DATASET_MAGIC: &[u8; 4] = b"XAGD";
pub const DATASET_VERSION: u16 = 1;

/// Minimum Frobenius distance between prototype sets of distinct identities.
pub const MIN_PROTOTYPE_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityConfig {
    pub image_noise: f64,
    pub text_noise: f64,
    pub text_mixing: f64,
    pub images_per_id: usize,
    pub texts_per_id: usize,
    pub num_ids: usize,
    /// Standard deviation of the prototype entries; the signal scale against
    /// which the two noise levels are measured.
    pub prototype_scale: f64,
    /// Rank of the identity attribute space. When nonzero, every identity is
    /// a latent attribute vector mapped into each region by a basis shared
    /// across identities; zero draws every prototype independently.
    pub attribute_dim: usize,
    pub seed: u64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            image_noise: 0.3,
            text_noise: 0.3,
            text_mixing: 0.5,
            images_per_id: 4,
            texts_per_id: 4,
            num_ids: 32,
            prototype_scale: 2.0,
            attribute_dim: 8,
            seed: 7,
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.image_noise >= 0.0 && self.text_noise >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.text_mixing) {
            return Err(Error::Config("text_mixing must lie in [0, 1]".into()));
        }
        if self.images_per_id == 0 || self.texts_per_id == 0 {
            return Err(Error::Config("per-identity sample counts must be >= 1".into()));
        }
        if !(self.prototype_scale > 0.0) {
            return Err(Error::Config("prototype_scale must be > 0".into()));
        }
        if self.num_ids < 4 {
            return Err(Error::Config(format!("need at least 4 identities, got {}", self.num_ids)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityPrototype {
    pub patches: Tensor,
    pub id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub split: Split,
    pub diversity: DiversityConfig,
    pub dims: ModelDims,
    pub images: Vec<SyntheticImageSample>,
    pub texts: Vec<SyntheticTextSample>,
}

/// Identities assigned to each split, `[train, val, test]`, 70/15/15.
fn split_counts(num_ids: usize) -> [usize; 3] {
    let held = ((num_ids as f64) * 0.15).round().max(1.0) as usize;
    [num_ids - 2 * held, held, held]
}

fn gaussian_row(cols: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sigma * z
        })
        .collect()
}

fn draw_prototypes(cfg: &DiversityConfig, dims: &ModelDims, rng: &mut impl Rng) -> Result<Vec<IdentityPrototype>> {
    let r = cfg.attribute_dim;
    let bases: Vec<Tensor> = (0..if r > 0 { dims.n_nodes } else { 0 })
        .map(|_| Tensor::new(r, dims.dim_in, gaussian_row(r * dims.dim_in, 1.0 / (r as f64).sqrt(), rng)))
        .collect::<Result<_>>()?;
    let mut out: Vec<IdentityPrototype> = Vec::with_capacity(cfg.num_ids);
    for id in 0..cfg.num_ids {
        let mut attempts = 0;
        loop {
            let patches = if r == 0 {
                Tensor::new(dims.n_nodes, dims.dim_in, gaussian_row(dims.n_nodes * dims.dim_in, cfg.prototype_scale, rng))?
            } else {
                let z = Tensor::row_vector(gaussian_row(r, cfg.prototype_scale, rng))?;
                let rows = bases.iter().map(|b| z.matmul(b)).collect::<Result<Vec<_>>>()?;
                Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?
            };
            let far_enough = out.iter().all(|p| {
                patches
                    .sub(&p.patches)
                    .map(|d| d.data().iter().map(|v| v * v).sum::<f64>().sqrt() >= MIN_PROTOTYPE_DISTANCE)
                    .unwrap_or(false)
            });
            if far_enough {
                out.push(IdentityPrototype { patches, id: id as u32 });
                break;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Config("cannot draw distinct identity prototypes".into()));
            }
        }
    }
    Ok(out)
}

fn image_sample(proto: &IdentityPrototype, cfg: &DiversityConfig, dims: &ModelDims, rng: &mut impl Rng) -> Result<SyntheticImageSample> {
    let mut patches = Vec::with_capacity(dims.n_nodes);
    for l in 0..dims.n_nodes {
        let base = proto.patches.row(l);
        let mut data = Vec::with_capacity(dims.patch_rows * dims.dim_in);
        for _ in 0..dims.patch_rows {
            let noise = gaussian_row(dims.dim_in, cfg.image_noise, rng);
            data.extend(base.iter().zip(noise).map(|(b, z)| b + z));
        }
        patches.push(Tensor::new(dims.patch_rows, dims.dim_in, data)?);
    }
    let mean = proto.patches.col_sums().scale(1.0 / dims.n_nodes as f64);
    let noise = gaussian_row(dims.dim_in, cfg.image_noise, rng);
    let stage = Tensor::row_vector(mean.data().iter().zip(noise).map(|(m, z)| m + z).collect())?;
    Ok(SyntheticImageSample {
        patches,
        stage,
        identity: proto.id,
    })
}

fn text_sample(proto: &IdentityPrototype, cfg: &DiversityConfig, dims: &ModelDims, rng: &mut impl Rng) -> Result<SyntheticTextSample> {
    let mut data = Vec::with_capacity(dims.tokens * dims.dim_in);
    for m in 0..dims.tokens {
        let region = m % dims.n_nodes;
        let neighbour = (region + 1) % dims.n_nodes;
        let u: f64 = rng.random();
        let alpha = cfg.text_mixing * u;
        let noise = gaussian_row(dims.dim_in, cfg.text_noise, rng);
        let (a, b) = (proto.patches.row(region), proto.patches.row(neighbour));
        data.extend((0..dims.dim_in).map(|c| (1.0 - alpha) * a[c] + alpha * b[c] + noise[c]));
    }
    Ok(SyntheticTextSample {
        tokens: Tensor::new(dims.tokens, dims.dim_in, data)?,
        identity: proto.id,
    })
}

/// Generates identity-disjoint train/val/test files.
pub fn generate(cfg: &DiversityConfig, dims: &ModelDims) -> Result<[DatasetFile; 3]> {
    cfg.validate()?;
    dims.validate()?;
    let counts = split_counts(cfg.num_ids);
    if counts.contains(&0) {
        return Err(Error::Config(format!("split sizes {counts:?} leave a split empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = draw_prototypes(cfg, dims, &mut rng)?;

    let mut order: Vec<usize> = (0..cfg.num_ids).collect();
    order.shuffle(&mut rng);
    let mut assignment = vec![Split::Train; cfg.num_ids];
    for &id in &order[counts[0]..counts[0] + counts[1]] {
        assignment[id] = Split::Val;
    }
    for &id in &order[counts[0] + counts[1]..] {
        assignment[id] = Split::Test;
    }

    let mut files = Split::ALL.map(|split| DatasetFile {
        split,
        diversity: *cfg,
        dims: *dims,
        images: Vec::new(),
        texts: Vec::new(),
    });
    for proto in &prototypes {
        let file = &mut files[assignment[proto.id as usize] as usize];
        for _ in 0..cfg.images_per_id {
            file.images.push(image_sample(proto, cfg, dims, &mut rng)?);
        }
        for _ in 0..cfg.texts_per_id {
            file.texts.push(text_sample(proto, cfg, dims, &mut rng)?);
        }
    }
    Ok(files)
}

/// One sampled batch: indices into the dataset plus its match labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub image_indices: Vec<usize>,
    pub text_indices: Vec<usize>,
    pub labels: MatchLabels,
}

impl Batch {
    pub fn images<'a>(&self, ds: &'a DatasetFile) -> Vec<&'a SyntheticImageSample> {
        self.image_indices.iter().map(|&i| &ds.images[i]).collect()
    }

    pub fn texts<'a>(&self, ds: &'a DatasetFile) -> Vec<&'a SyntheticTextSample> {
        self.text_indices.iter().map(|&i| &ds.texts[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.image_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_indices.is_empty()
    }
}

/// `n` distinct images, each paired with a random text of the same identity.
pub fn sample_batch(ds: &DatasetFile, n: usize, rng: &mut impl Rng) -> Result<Batch> {
    if n == 0 {
        return Err(Error::Contract("batch size must be >= 1".into()));
    }
    if n > ds.images.len() {
        return Err(Error::Contract(format!(
            "batch of {n} exceeds the {} available images",
            ds.images.len()
        )));
    }
    let mut texts_by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, t) in ds.texts.iter().enumerate() {
        texts_by_id.entry(t.identity).or_default().push(i);
    }
    let image_indices: Vec<usize> = index::sample(rng, ds.images.len(), n).into_vec();
    let mut text_indices = Vec::with_capacity(n);
    for &i in &image_indices {
        let id = ds.images[i].identity;
        let pool = texts_by_id
            .get(&id)
            .ok_or_else(|| Error::Contract(format!("identity {id} has no text")))?;
        text_indices.push(pool[rng.random_range(0..pool.len())]);
    }
    let image_ids: Vec<u32> = image_indices.iter().map(|&i| ds.images[i].identity).collect();
    let text_ids: Vec<u32> = text_indices.iter().map(|&i| ds.texts[i].identity).collect();
    Ok(Batch {
        labels: MatchLabels::from_identities(&image_ids, &text_ids)?,
        image_indices,
        text_indices,
    })
}

impl DatasetFile {
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.images.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn config_block(&self) -> String {
        let c = &self.diversity;
        let d = &self.dims;
        format!(
            "split={}\nnum_ids={}\nimages_per_id={}\ntexts_per_id={}\nimage_noise={}\ntext_noise={}\n\
             text_mixing={}\nprototype_scale={}\nattribute_dim={}\nseed={}\nn_nodes={}\ndim={}\ndim_in={}\n\
             patch_rows={}\ntokens={}\n",
            self.split.name(),
            c.num_ids,
            c.images_per_id,
            c.texts_per_id,
            c.image_noise,
            c.text_noise,
            c.text_mixing,
            c.prototype_scale,
            c.attribute_dim,
            c.seed,
            d.n_nodes,
            d.dim,
            d.dim_in,
            d.patch_rows,
            d.tokens
        )
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        let block = self.config_block();
        w.write_all(&(block.len() as u32).to_le_bytes())?;
        w.write_all(block.as_bytes())?;
        let count = self.images.len() + self.texts.len();
        w.write_all(&(count as u32).to_le_bytes())?;
        for s in &self.images {
            w.write_all(&[Modality::Image.code()])?;
            w.write_all(&s.identity.to_le_bytes())?;
            w.write_all(&((s.patches.len() + 1) as u32).to_le_bytes())?;
            for p in &s.patches {
                p.write_to(w)?;
            }
            s.stage.write_to(w)?;
        }
        for s in &self.texts {
            w.write_all(&[Modality::Text.code()])?;
            w.write_all(&s.identity.to_le_bytes())?;
            w.write_all(&1u32.to_le_bytes())?;
            s.tokens.write_to(w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Integrity("bad dataset magic".into()));
        }
        let mut version = [0u8; 2];
        read_exact(r, &mut version)?;
        if u16::from_le_bytes(version) != DATASET_VERSION {
            return Err(Error::Integrity("unsupported dataset version".into()));
        }
        let len = read_u32(r)? as usize;
        if len > 1 << 20 {
            return Err(Error::Integrity("implausible config block length".into()));
        }
        let mut block = vec![0u8; len];
        read_exact(r, &mut block)?;
        let block = String::from_utf8(block).map_err(|_| Error::Integrity("config block is not UTF-8".into()))?;
        let (split, diversity, dims) = parse_config_block(&block)?;

        let count = read_u32(r)? as usize;
        let mut images = Vec::new();
        let mut texts = Vec::new();
        for _ in 0..count {
            let mut code = [0u8; 1];
            read_exact(r, &mut code)?;
            let modality = Modality::from_code(code[0])
                .ok_or_else(|| Error::Integrity(format!("unknown modality code {}", code[0])))?;
            let identity = read_u32(r)?;
            let n_tensors = read_u32(r)? as usize;
            if n_tensors > 1024 {
                return Err(Error::Integrity("implausible tensor count".into()));
            }
            let mut tensors = Vec::with_capacity(n_tensors);
            for _ in 0..n_tensors {
                tensors.push(Tensor::read_from(r)?);
            }
            match modality {
                Modality::Image => {
                    let stage = tensors
                        .pop()
                        .ok_or_else(|| Error::Integrity("image record without tensors".into()))?;
                    let s = SyntheticImageSample { patches: tensors, stage, identity };
                    s.check(&dims).map_err(|e| Error::Integrity(e.to_string()))?;
                    images.push(s);
                }
                Modality::Text => {
                    if tensors.len() != 1 {
                        return Err(Error::Integrity("text record needs one tensor".into()));
                    }
                    let s = SyntheticTextSample {
                        tokens: tensors.pop().expect("one tensor"),
                        identity,
                    };
                    s.check(&dims).map_err(|e| Error::Integrity(e.to_string()))?;
                    texts.push(s);
                }
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Integrity("trailing bytes after dataset".into()));
        }
        Ok(Self {
            split,
            diversity,
            dims,
            images,
            texts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn parse_config_block(block: &str) -> Result<(Split, DiversityConfig, ModelDims)> {
    let mut map = BTreeMap::new();
    for line in block.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Integrity(format!("malformed config line {line:?}")))?;
        map.insert(k, v);
    }
    fn get<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
        map.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Integrity(format!("missing or malformed {key} in dataset header")))
    }
    let split_name: String = get(&map, "split")?;
    let split = Split::parse(&split_name).ok_or_else(|| Error::Integrity(format!("unknown split {split_name}")))?;
    let diversity = DiversityConfig {
        image_noise: get(&map, "image_noise")?,
        text_noise: get(&map, "text_noise")?,
        text_mixing: get(&map, "text_mixing")?,
        images_per_id: get(&map, "images_per_id")?,
        texts_per_id: get(&map, "texts_per_id")?,
        num_ids: get(&map, "num_ids")?,
        prototype_scale: get(&map, "prototype_scale")?,
        attribute_dim: get(&map, "attribute_dim")?,
        seed: get(&map, "seed")?,
    };
    let dims = ModelDims {
        n_nodes: get(&map, "n_nodes")?,
        dim: get(&map, "dim")?,
        dim_in: get(&map, "dim_in")?,
        patch_rows: get(&map, "patch_rows")?,
        tokens: get(&map, "tokens")?,
    };
    Ok((split, diversity, dims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> (DiversityConfig, ModelDims) {
        (
            DiversityConfig {
                num_ids: 8,
                images_per_id: 2,
                texts_per_id: 3,
                ..Default::default()
            },
            ModelDims {
                n_nodes: 2,
                dim: 4,
                dim_in: 5,
                patch_rows: 2,
                tokens: 3,
            },
        )
    }

    #[test]
    fn splits_are_identity_disjoint_and_complete() {
        let (cfg, dims) = small();
        let files = generate(&cfg, &dims).unwrap();
        let mut seen = BTreeSet::new();
        for f in &files {
            let ids: BTreeSet<u32> = f.identities().into_iter().collect();
            let text_ids: BTreeSet<u32> = f.texts.iter().map(|t| t.identity).collect();
            assert_eq!(ids, text_ids);
            assert!(!ids.is_empty());
            for id in ids {
                assert!(seen.insert(id), "identity {id} in two splits");
            }
        }
        assert_eq!(seen.len(), 8);
        assert_eq!(split_counts(32), [22, 5, 5]);
        assert_eq!(split_counts(4), [2, 1, 1]);
    }

    #[test]
    fn noiseless_identities_are_constant() {
        let (mut cfg, dims) = small();
        cfg.image_noise = 0.0;
        cfg.text_noise = 0.0;
        cfg.text_mixing = 0.0;
        let files = generate(&cfg, &dims).unwrap();
        for f in &files {
            for a in &f.images {
                for b in f.images.iter().filter(|b| b.identity == a.identity) {
                    assert_eq!(a, b);
                }
            }
            for a in &f.texts {
                for b in f.texts.iter().filter(|b| b.identity == a.identity) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (cfg, dims) = small();
        let a = generate(&cfg, &dims).unwrap();
        let b = generate(&cfg, &dims).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bytes(), y.to_bytes());
        }
        let other = generate(&DiversityConfig { seed: 99, ..cfg }, &dims).unwrap();
        assert_ne!(a[0].to_bytes(), other[0].to_bytes());
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let (cfg, dims) = small();
        let files = generate(&cfg, &dims).unwrap();
        let bytes = files[1].to_bytes();
        assert_eq!(&bytes[..4], b"XAGD");
        let back = DatasetFile::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, files[1]);
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                DatasetFile::read_from(&mut &bytes[..cut]),
                Err(Error::Integrity(_))
            ));
        }
    }

    #[test]
    fn within_identity_images_are_more_similar() {
        let files = generate(&DiversityConfig::default(), &ModelDims::default()).unwrap();
        let flat: Vec<(u32, Vec<f64>)> = files
            .iter()
            .flat_map(|f| f.images.iter())
            .map(|s| (s.identity, s.patches.iter().flat_map(|p| p.data().to_vec()).collect()))
            .collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for i in 0..flat.len() {
            for j in i + 1..flat.len() {
                let c = cos(&flat[i].1, &flat[j].1);
                if flat[i].0 == flat[j].0 {
                    within += c;
                    nw += 1;
                } else {
                    cross += c;
                    nc += 1;
                }
            }
        }
        assert!(within / nw as f64 > cross / nc as f64);
    }

    #[test]
    fn batch_labels() {
        let (cfg, dims) = small();
        let train = &generate(&cfg, &dims).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(train, 1, &mut rng).unwrap();
        assert_eq!(b.labels.y(), &Tensor::ones(1, 1));
        assert!(sample_batch(train, 0, &mut rng).is_err());
        assert!(sample_batch(train, train.images.len() + 1, &mut rng).is_err());

        for _ in 0..20 {
            let b = sample_batch(train, 4, &mut rng).unwrap();
            let ids: Vec<u32> = b.images(train).iter().map(|s| s.identity).collect();
            let tids: Vec<u32> = b.texts(train).iter().map(|s| s.identity).collect();
            assert_eq!(ids, tids);
            for i in 0..4 {
                assert_eq!(b.labels.y().get(i, i), 1.0);
                for j in 0..4 {
                    let expect = if ids[i] == ids[j] { 1.0 } else { 0.0 };
                    assert_eq!(b.labels.y().get(i, j), expect);
                    assert_eq!(b.labels.y().get(i, j), b.labels.y().get(j, i));
                }
            }
        }
    }

    #[test]
    fn config_errors() {
        let (cfg, dims) = small();
        assert!(generate(&DiversityConfig { num_ids: 3, ..cfg }, &dims).is_err());
        assert!(generate(&DiversityConfig { text_mixing: 1.5, ..cfg }, &dims).is_err());
    }
}
