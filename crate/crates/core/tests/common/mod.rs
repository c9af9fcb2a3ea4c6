#![allow(dead_code)]

use std::path::PathBuf;

use avsrerank::embedstore::{EmbeddingStore, FrameMatrix, QueryEmbeddings};
use avsrerank::runio::{Qrels, RankedRun};
use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn gaussian(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
    v
}

pub fn random_unit(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    unit(gaussian(rng, dim))
}

/// Random run/store/query triple: every candidate has 1..=max_frames frames.
pub struct RandomCorpus {
    pub run: RankedRun,
    pub store: EmbeddingStore,
    pub queries: QueryEmbeddings,
}

pub fn random_corpus(
    rng: &mut StdRng,
    n_queries: usize,
    max_candidates: usize,
    dim: usize,
    max_frames: usize,
) -> RandomCorpus {
    let mut store = EmbeddingStore::builder(dim).normalized(true);
    let mut qvecs = Vec::new();
    let mut lists = Vec::new();
    for q in 0..n_queries {
        let qid = format!("q{q}");
        qvecs.push((qid.clone(), random_unit(rng, dim)));
        let n = rng.random_range(1..=max_candidates);
        let mut list = Vec::with_capacity(n);
        for v in 0..n {
            let vid = format!("{qid}_v{v}");
            let frames = rng.random_range(1..=max_frames);
            let data: Vec<f32> = (0..frames).flat_map(|_| random_unit(rng, dim)).collect();
            store.insert(vid.clone(), FrameMatrix::new(dim, data).unwrap()).unwrap();
            list.push((vid, rng.random_range(-5.0..5.0)));
        }
        lists.push((qid, list));
    }
    RandomCorpus {
        run: RankedRun::from_scored("rand", lists).unwrap(),
        store: store.build().unwrap(),
        queries: QueryEmbeddings::from_vectors(dim, qvecs).unwrap(),
    }
}

/// Simulated search scenario: each relevant video hides one frame close to
/// the query among noise frames; the base run is the relevance label plus
/// Gaussian noise.
pub struct PlantedCorpus {
    pub run: RankedRun,
    pub store: EmbeddingStore,
    pub queries: QueryEmbeddings,
    pub qrels: Qrels,
}

pub struct PlantedParams {
    pub n_queries: usize,
    pub n_candidates: usize,
    pub n_frames: usize,
    pub dim: usize,
    pub relevant_rate: f64,
    /// Std-dev of the base score noise; relevant videos get +1 signal.
    pub base_noise: f64,
    /// Magnitude of the perturbation added to the planted frame.
    pub frame_noise: f32,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            n_queries: 10,
            n_candidates: 100,
            n_frames: 8,
            dim: 64,
            relevant_rate: 0.15,
            base_noise: 1.0,
            frame_noise: 0.7,
        }
    }
}

pub fn planted_corpus(rng: &mut StdRng, p: &PlantedParams) -> PlantedCorpus {
    let mut store = EmbeddingStore::builder(p.dim).normalized(true);
    let mut qvecs = Vec::new();
    let mut lists = Vec::new();
    let mut qrels = Qrels::builder();
    for q in 0..p.n_queries {
        let qid = format!("q{q}");
        let qv = random_unit(rng, p.dim);
        let mut flags: Vec<bool> = (0..p.n_candidates).map(|_| rng.random_bool(p.relevant_rate)).collect();
        // Every query needs a relevant video to be evaluable.
        if !flags.contains(&true) {
            flags[0] = true;
        }
        let mut list = Vec::with_capacity(p.n_candidates);
        let mut judgments = Vec::new();
        for (v, &relevant) in flags.iter().enumerate() {
            let vid = format!("{qid}_v{v}");
            let mut frames: Vec<Vec<f32>> = (0..p.n_frames).map(|_| random_unit(rng, p.dim)).collect();
            if relevant {
                let noise = random_unit(rng, p.dim);
                let planted: Vec<f32> = qv.iter().zip(&noise).map(|(a, b)| a + p.frame_noise * b).collect();
                let slot = rng.random_range(0..p.n_frames);
                frames[slot] = unit(planted);
            }
            store
                .insert(vid.clone(), FrameMatrix::new(p.dim, frames.concat()).unwrap())
                .unwrap();
            let noise: f64 = StandardNormal.sample(rng);
            list.push((vid.clone(), f64::from(u8::from(relevant)) + p.base_noise * noise));
            judgments.push((vid, relevant));
        }
        let n = judgments.len() as u64;
        qrels.stratum(&qid, 0, n, n).unwrap();
        for (vid, rel) in &judgments {
            qrels.judge(&qid, 0, vid, *rel).unwrap();
        }
        qvecs.push((qid.clone(), qv));
        lists.push((qid, list));
    }
    PlantedCorpus {
        run: RankedRun::from_scored("planted", lists).unwrap(),
        store: store.build().unwrap(),
        queries: QueryEmbeddings::from_vectors(p.dim, qvecs).unwrap(),
        qrels: qrels.build().unwrap(),
    }
}
