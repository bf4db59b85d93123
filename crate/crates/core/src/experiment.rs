//! Toy end-to-end run: procedural references, the full distortion bank,
//! encoder pre-training on mixed samples, then a linear probe evaluated on
//! held-out references.
//!
//! Three encoders are compared per seed on identical data: pre-trained with
//! sensitivity-weighted labels, pre-trained with area-ratio labels, and a
//! random frozen network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distortion::{apply_distortion, DistortionSpec, DistortionType, NUM_LEVELS};
use crate::dsm::DsmProvider;
use crate::dsmix::{dsmix_sample, LabelWeighting, MixSource, MAX_SOURCES};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::label::SoftLabel;
use crate::manifest::DistortionMeta;
use crate::metrics::{srcc, ScorePairs};
use crate::nn::{NetShape, TinyNet};
use crate::rng;
use crate::synth::procedural_reference;
use crate::trainkit::{
    fit_probe, five_patch_predict, five_patches, qep_train, teacher_net, Encoder, ProbeConfig,
    ProbeHead, QepConfig, QepSample,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_refs: usize,
    pub n_test_refs: usize,
    pub size: usize,
    pub crop: usize,
    pub n_samples: usize,
    pub mix_max: usize,
    pub patch_size: usize,
    pub qep: QepConfig,
    pub probe: ProbeConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_refs: 50,
            n_test_refs: 10,
            size: 32,
            crop: 24,
            n_samples: 2000,
            mix_max: MAX_SOURCES,
            patch_size: 8,
            qep: QepConfig {
                epochs: 24,
                lr: 0.02,
                ..QepConfig::default()
            },
            probe: ProbeConfig::default(),
        }
    }
}

/// Held-out SRCC of each arm for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySeedResult {
    pub seed: u64,
    pub dsmix: f64,
    pub area: f64,
    pub random: f64,
    pub dsmix_loss: Vec<f64>,
    pub area_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySummary {
    pub runs: Vec<ToySeedResult>,
    pub mean_dsmix: f64,
    pub mean_area: f64,
    pub mean_random: f64,
}

impl ToySummary {
    pub fn beats_random(&self) -> bool {
        self.mean_dsmix > self.mean_random
    }

    pub fn beats_area(&self) -> bool {
        self.mean_dsmix > self.mean_area
    }
}

/// One image of the distorted pool with its provenance.
struct PoolItem {
    id: String,
    image: ImageRgb,
    ref_index: usize,
    meta: DistortionMeta,
    label: SoftLabel,
}

/// `1 − level/5` for a distorted image, 1 for a reference.
pub fn toy_score(meta: &DistortionMeta) -> f64 {
    if meta.is_reference() {
        1.0
    } else {
        1.0 - f64::from(meta.level) / NUM_LEVELS as f64
    }
}

fn build_pool(refs: &[ImageRgb], seed: u64, offset: usize) -> Result<Vec<PoolItem>> {
    let num_classes = crate::distortion::CLASS_SPACE.num_classes();
    let mut pool = Vec::new();
    for (k, reference) in refs.iter().enumerate() {
        let r = k + offset;
        pool.push(PoolItem {
            id: format!("ref{r:03}"),
            image: reference.clone(),
            ref_index: k,
            meta: DistortionMeta::REFERENCE,
            label: SoftLabel::one_hot(0, num_classes)?,
        });
        for dtype in DistortionType::ALL {
            for level in 1..=NUM_LEVELS as u8 {
                let spec = DistortionSpec::new(dtype, level)?;
                let s = rng::child_seed(seed, "toy_distort", (r * 64 + spec.class_index()) as u64);
                pool.push(PoolItem {
                    id: format!("ref{r:03}_{}_{level}", dtype.name()),
                    image: apply_distortion(reference, &spec, s)?,
                    ref_index: k,
                    meta: DistortionMeta::distorted(dtype, level),
                    label: SoftLabel::one_hot(spec.class_index(), num_classes)?,
                });
            }
        }
    }
    Ok(pool)
}

fn mixed_corpus(
    pool: &[PoolItem],
    refs: &[ImageRgb],
    cfg: &ToyConfig,
    seed: u64,
    weighting: LabelWeighting<'_>,
) -> Result<Vec<QepSample>> {
    let mut out = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut pick = rng::stream(seed, "toy_mix_sources", i as u64);
        let mix = pick.random_range(1..=cfg.mix_max);
        let mut chosen: Vec<usize> = Vec::with_capacity(mix);
        while chosen.len() < mix {
            let j = pick.random_range(0..pool.len());
            if !chosen.contains(&j) {
                chosen.push(j);
            }
        }
        let sources: Vec<MixSource<'_>> = chosen
            .iter()
            .map(|&j| MixSource {
                id: &pool[j].id,
                image: &pool[j].image,
                label: &pool[j].label,
                meta: pool[j].meta,
                reference: Some(&refs[pool[j].ref_index]),
            })
            .collect();
        let mix_seed = rng::child_seed(seed, "toy_mix", i as u64);
        let sample = dsmix_sample(&format!("toy_{i:05}"), &sources, weighting, mix_seed)?;
        out.push(QepSample::from_mix(sample));
    }
    Ok(out)
}

fn probe_and_score<E: Encoder>(
    encoder: &E,
    train: &[PoolItem],
    test: &[PoolItem],
    cfg: &ToyConfig,
    seed: u64,
) -> Result<f64> {
    let mut feats = Vec::with_capacity(train.len() * 5);
    let mut targets = Vec::with_capacity(train.len() * 5);
    for item in train {
        for crop in five_patches(&item.image, cfg.crop)? {
            feats.push(encoder.embed(&crop)?);
            targets.push(toy_score(&item.meta));
        }
    }
    let probe_cfg = ProbeConfig {
        seed: rng::child_seed(seed, "toy_probe", 0),
        ..cfg.probe.clone()
    };
    let head: ProbeHead = fit_probe(&feats, &targets, &probe_cfg)?;
    let mut gt = Vec::with_capacity(test.len());
    let mut pred = Vec::with_capacity(test.len());
    for item in test {
        gt.push(toy_score(&item.meta));
        pred.push(five_patch_predict(encoder, &head, &item.image, cfg.crop)?);
    }
    srcc(&ScorePairs::new(gt, pred)?)
}

/// Runs all three arms for one seed on shared data.
pub fn run_toy_seed(cfg: &ToyConfig, seed: u64) -> Result<ToySeedResult> {
    if cfg.n_test_refs == 0 || cfg.n_test_refs >= cfg.n_refs {
        return Err(Error::validation("need both training and held-out references"));
    }
    let refs = (0..cfg.n_refs)
        .map(|i| procedural_reference(cfg.size, cfg.size, seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let n_train = cfg.n_refs - cfg.n_test_refs;
    let (train_refs, test_refs) = refs.split_at(n_train);
    let train_pool = build_pool(train_refs, seed, 0)?;
    let test_pool = build_pool(test_refs, seed, n_train)?;

    let teacher = teacher_net(seed);
    let qep = QepConfig {
        seed: rng::child_seed(seed, "toy_qep", 0),
        ..cfg.qep.clone()
    };
    let provider = DsmProvider::ground_truth(cfg.patch_size);
    let dsm_corpus = mixed_corpus(&train_pool, train_refs, cfg, seed, LabelWeighting::Dsm(&provider))?;
    let dsm_run = qep_train(&dsm_corpus, &teacher, &qep)?;
    drop(dsm_corpus);
    let area_corpus = mixed_corpus(&train_pool, train_refs, cfg, seed, LabelWeighting::Area)?;
    let area_run = qep_train(&area_corpus, &teacher, &qep)?;
    drop(area_corpus);

    let random = TinyNet::new(NetShape::default(), rng::child_seed(seed, "toy_random", 0)).freeze();
    let dsm_encoder = dsm_run.student.freeze();
    let area_encoder = area_run.student.freeze();
    Ok(ToySeedResult {
        seed,
        dsmix: probe_and_score(&dsm_encoder, &train_pool, &test_pool, cfg, seed)?,
        area: probe_and_score(&area_encoder, &train_pool, &test_pool, cfg, seed)?,
        random: probe_and_score(&random, &train_pool, &test_pool, cfg, seed)?,
        dsmix_loss: dsm_run.epoch_losses,
        area_loss: area_run.epoch_losses,
    })
}

pub fn run_toy(cfg: &ToyConfig, seeds: &[u64]) -> Result<ToySummary> {
    if seeds.is_empty() {
        return Err(Error::validation("need at least one seed"));
    }
    let runs = seeds
        .iter()
        .map(|&s| run_toy_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&ToySeedResult) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    Ok(ToySummary {
        mean_dsmix: mean(|r| r.dsmix),
        mean_area: mean(|r| r.area),
        mean_random: mean(|r| r.random),
        runs,
    })
}
