//! Retrieval embeddings, CMC ranking and the four-row ablation table.

use std::fmt::Write as _;

use crate::data::DatasetFile;
use crate::encoders::{
    encode_image, encode_images_batch, encode_images_global_batch, encode_text_nodes_batch, encode_text_tokens, encode_texts_batch,
    ft_transform, SyntheticImageSample, SyntheticTextSample,
};
use crate::error::{Error, Result};
use crate::graph::{
    attacked_gcn_node_major, build_adjacency, concat_semantic_global, gcn_forward, gcn_forward_node_major,
    implant_attack_node, strip_attack_node, FeatureGraph, GcnParams,
};
use crate::numcore::{ParamRegistry, Tape, Tensor, Var};
use crate::pipeline::{AttackNodes, CheckpointBundle, StageTag};
use crate::Modality;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Clean,
    Attacked,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Clean => "clean",
            Variant::Attacked => "attacked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(Variant::Clean),
            "attacked" => Some(Variant::Attacked),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SampleRef<'a> {
    Image(&'a SyntheticImageSample),
    Text(&'a SyntheticTextSample),
}

/// Graph weights used at inference: the attack branch once it exists.
fn inference_gcn(bundle: &CheckpointBundle) -> &GcnParams {
    bundle.gcn_attack.as_ref().unwrap_or(&bundle.gcn)
}

fn attack_nodes(bundle: &CheckpointBundle, variant: Variant) -> Result<Option<&AttackNodes>> {
    match variant {
        Variant::Clean => Ok(None),
        Variant::Attacked => bundle
            .attack
            .as_ref()
            .map(Some)
            .ok_or_else(|| Error::State(format!("a {} checkpoint has no attack nodes", bundle.stage.name()))),
    }
}

/// Retrieval feature of one sample. Graph models give `1 x N*D`; the
/// baseline gives its pooled `1 x D` feature.
pub fn embed_for_retrieval(sample: SampleRef<'_>, bundle: &CheckpointBundle, variant: Variant) -> Result<Tensor> {
    let attack = attack_nodes(bundle, variant)?;
    if bundle.stage == StageTag::Baseline {
        let mut tape = Tape::new();
        let vars = bundle.encoder.register(&mut tape, &mut ParamRegistry::new(), false);
        let v = match sample {
            SampleRef::Image(s) => encode_images_global_batch(&mut tape, &vars, &[s])?,
            SampleRef::Text(s) => encode_texts_batch(&mut tape, &vars, &[s])?,
        };
        return Ok(tape.value(v).clone());
    }
    let (graph, attack_node) = match sample {
        SampleRef::Image(s) => (
            FeatureGraph::complete(encode_image(s, &bundle.encoder)?.0, Modality::Image, s.identity)?,
            attack.map(|a| &a.image),
        ),
        SampleRef::Text(s) => {
            let tokens = encode_text_tokens(s, &bundle.encoder)?;
            let nodes = ft_transform(&tokens, &bundle.encoder.ft_bank)?;
            (FeatureGraph::complete(nodes, Modality::Text, s.identity)?, attack.map(|a| &a.text))
        }
    };
    let gcn = inference_gcn(bundle);
    let out = match attack_node {
        None => gcn_forward(graph.nodes(), graph.adjacency(), gcn)?,
        Some(x) => {
            let aug = implant_attack_node(&graph, x)?;
            strip_attack_node(&gcn_forward(&aug.nodes, &aug.adjacency, gcn)?)?
        }
    };
    Ok(concat_semantic_global(&out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub images: Tensor,
    pub image_ids: Vec<u32>,
    pub texts: Tensor,
    pub text_ids: Vec<u32>,
}

/// Batched [`embed_for_retrieval`] over a whole split.
pub fn embed_split(ds: &DatasetFile, bundle: &CheckpointBundle, variant: Variant) -> Result<Embeddings> {
    let attack = attack_nodes(bundle, variant)?;
    let images: Vec<&SyntheticImageSample> = ds.images.iter().collect();
    let texts: Vec<&SyntheticTextSample> = ds.texts.iter().collect();
    let mut tape = Tape::new();
    let vars = bundle.encoder.register(&mut tape, &mut ParamRegistry::new(), false);
    let (iv, tv) = if bundle.stage == StageTag::Baseline {
        (
            encode_images_global_batch(&mut tape, &vars, &images)?,
            encode_texts_batch(&mut tape, &vars, &texts)?,
        )
    } else {
        let adjacency = build_adjacency(bundle.encoder.ft_bank.transforms.len())?;
        let weights: Vec<Var> = inference_gcn(bundle)
            .layers()
            .iter()
            .map(|w| tape.constant(w.clone()))
            .collect();
        let (image_nodes, _) = encode_images_batch(&mut tape, &vars, &images)?;
        let text_nodes = encode_text_nodes_batch(&mut tape, &vars, &texts)?;
        let convolve = |tape: &mut Tape, nodes: &[Var], x: Option<&Tensor>| -> Result<Var> {
            let out = match x {
                None => gcn_forward_node_major(tape, nodes, &adjacency, &weights)?,
                Some(x) => {
                    let xv = tape.constant(x.clone());
                    attacked_gcn_node_major(tape, nodes, xv, &adjacency, &weights)?
                }
            };
            tape.concat_cols(&out)
        };
        let iv = convolve(&mut tape, &image_nodes, attack.map(|a| &a.image.vector))?;
        let tv = convolve(&mut tape, &text_nodes, attack.map(|a| &a.text.vector))?;
        (iv, tv)
    };
    Ok(Embeddings {
        images: tape.value(iv).clone(),
        image_ids: ds.images.iter().map(|s| s.identity).collect(),
        texts: tape.value(tv).clone(),
        text_ids: ds.texts.iter().map(|s| s.identity).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcResult {
    pub ks: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub num_queries: usize,
    /// Queries whose identity has no gallery item; counted as misses.
    pub missing_queries: usize,
}

impl CmcResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.accuracies[i])
    }
}

/// Gallery order for one query: descending cosine similarity, ties by
/// ascending gallery index.
pub fn rank_gallery(query: &[f64], gallery: &Tensor) -> Vec<usize> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sims: Vec<f64> = (0..gallery.rows())
        .map(|g| {
            let row = gallery.row(g);
            let gn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
            let denom = qn * gn;
            if denom > 0.0 {
                dot / denom
            } else {
                0.0
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

pub fn cmc(queries: &Tensor, query_ids: &[u32], gallery: &Tensor, gallery_ids: &[u32], ks: &[usize]) -> Result<CmcResult> {
    if gallery_ids.is_empty() {
        return Err(Error::Contract("empty gallery".into()));
    }
    if gallery.rows() != gallery_ids.len() || queries.rows() != query_ids.len() {
        return Err(Error::Contract("embedding rows and identity lists differ in length".into()));
    }
    if queries.cols() != gallery.cols() {
        return Err(Error::dim("cmc", queries.shape(), gallery.shape()));
    }
    if ks.contains(&0) {
        return Err(Error::Contract("rank k must be >= 1".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    let mut missing = 0;
    for (q, &qid) in query_ids.iter().enumerate() {
        if !gallery_ids.contains(&qid) {
            missing += 1;
            continue;
        }
        let order = rank_gallery(queries.row(q), gallery);
        let first = order
            .iter()
            .position(|&g| gallery_ids[g] == qid)
            .expect("identity present in gallery");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first < k {
                *h += 1;
            }
        }
    }
    let n = query_ids.len();
    Ok(CmcResult {
        ks: ks.to_vec(),
        accuracies: hits.iter().map(|&h| if n == 0 { 0.0 } else { h as f64 / n as f64 }).collect(),
        num_queries: n,
        missing_queries: missing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcReport {
    pub variant: Variant,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub checkpoint_hash: String,
}

impl CmcReport {
    pub fn render(&self) -> String {
        format!(
            "variant={}\nrank1={}\nrank5={}\nrank10={}\nnum_queries={}\ncheckpoint_hash={}\n",
            self.variant.name(),
            self.rank1,
            self.rank5,
            self.rank10,
            self.num_queries,
            self.checkpoint_hash
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Integrity(format!("malformed report line {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Integrity(format!("report lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Integrity(format!("report field {k} is not a number")))
        };
        Ok(Self {
            variant: Variant::parse(get("variant")?).ok_or_else(|| Error::Integrity("unknown report variant".into()))?,
            rank1: num("rank1")?,
            rank5: num("rank5")?,
            rank10: num("rank10")?,
            num_queries: get("num_queries")?
                .parse()
                .map_err(|_| Error::Integrity("report num_queries is not a count".into()))?,
            checkpoint_hash: get("checkpoint_hash")?.to_string(),
        })
    }
}

/// Text queries against the image gallery of `ds`.
pub fn evaluate(ds: &DatasetFile, bundle: &CheckpointBundle, variant: Variant) -> Result<CmcReport> {
    let e = embed_split(ds, bundle, variant)?;
    let r = cmc(&e.texts, &e.text_ids, &e.images, &e.image_ids, &DEFAULT_KS)?;
    if r.missing_queries > 0 {
        log::warn!("{} queries have no same-identity gallery item", r.missing_queries);
    }
    Ok(CmcReport {
        variant,
        rank1: r.accuracies[0],
        rank5: r.accuracies[1],
        rank10: r.accuracies[2],
        num_queries: r.num_queries,
        checkpoint_hash: bundle.digest_hex(),
    })
}

pub struct AblationBundles<'a> {
    pub baseline: Option<&'a CheckpointBundle>,
    pub scfc: Option<&'a CheckpointBundle>,
    pub anl: Option<&'a CheckpointBundle>,
    pub at: Option<&'a CheckpointBundle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub report: CmcReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationPattern {
    pub scfc_beats_baseline: bool,
    pub anl_below_scfc: bool,
    pub at_is_best: bool,
}

impl AblationPattern {
    pub fn holds(&self) -> bool {
        self.scfc_beats_baseline && self.anl_below_scfc && self.at_is_best
    }
}

impl AblationTable {
    pub fn rank1(&self, i: usize) -> f64 {
        self.rows[i].report.rank1
    }

    /// `baseline < +scfc`, `+anl (attacked) < +scfc`, `+at >=` every other row
    /// and strictly above the attacked row.
    pub fn pattern(&self) -> AblationPattern {
        let (b, s, a, t) = (self.rank1(0), self.rank1(1), self.rank1(2), self.rank1(3));
        AblationPattern {
            scfc_beats_baseline: b < s,
            anl_below_scfc: a < s,
            at_is_best: t >= b && t >= s && t > a,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("model\tvariant\trank1\trank5\trank10\tnum_queries\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
                r.name,
                r.report.variant.name(),
                r.report.rank1,
                r.report.rank5,
                r.report.rank10,
                r.report.num_queries
            );
        }
        let p = self.pattern();
        let _ = writeln!(
            out,
            "pattern\tscfc_beats_baseline={}\tanl_below_scfc={}\tat_is_best={}",
            p.scfc_beats_baseline, p.anl_below_scfc, p.at_is_best
        );
        out
    }
}

/// Four rows: baseline, +SCFC (clean), +ANL (stage-I model under the learned
/// attack), +AT (adversarially trained model, clean).
pub fn ablation_report(test: &DatasetFile, bundles: &AblationBundles<'_>) -> Result<AblationTable> {
    fn need<'b>(b: Option<&'b CheckpointBundle>, name: &str) -> Result<&'b CheckpointBundle> {
        b.ok_or_else(|| Error::Config(format!("ablation is missing the {name} checkpoint")))
    }
    let rows = vec![
        AblationRow {
            name: "baseline",
            report: evaluate(test, need(bundles.baseline, "baseline")?, Variant::Clean)?,
        },
        AblationRow {
            name: "+scfc",
            report: evaluate(test, need(bundles.scfc, "+scfc")?, Variant::Clean)?,
        },
        AblationRow {
            name: "+anl",
            report: evaluate(test, need(bundles.anl, "+anl")?, Variant::Attacked)?,
        },
        AblationRow {
            name: "+at",
            report: evaluate(test, need(bundles.at, "+at")?, Variant::Clean)?,
        },
    ];
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_retrieval_is_perfect() {
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = cmc(&g, &[0, 1, 2], &g, &[0, 1, 2], &DEFAULT_KS).unwrap();
        assert_eq!(r.accuracies, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(rank_gallery(&[1.0, 0.0], &g), vec![0, 1]);
        let q = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        assert_eq!(cmc(&q, &[5], &g, &[4, 5], &[1, 2]).unwrap().accuracies, vec![0.0, 1.0]);
    }

    #[test]
    fn contract_errors() {
        let g = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(cmc(&g, &[0], &g, &[], &[1]), Err(Error::Contract(_))));
        let r = cmc(&g, &[9], &g, &[0], &[1]).unwrap();
        assert_eq!((r.accuracies[0], r.missing_queries), (0.0, 1));
    }

    #[test]
    fn report_round_trip() {
        let r = CmcReport {
            variant: Variant::Attacked,
            rank1: 0.25,
            rank5: 0.5,
            rank10: 1.0,
            num_queries: 4,
            checkpoint_hash: "ab".into(),
        };
        assert_eq!(CmcReport::parse(&r.render()).unwrap(), r);
    }
}
