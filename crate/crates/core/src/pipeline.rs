//! On-disk pipeline steps driven by a [`RunConfig`].
//!
//! Layout produced by [`cmd_gen`]:
//!
//! ```text
//! out/references/{ref}.png
//! out/distorted/{ref}_{type}_{level}.png
//! out/dsm/{ref}_{type}_{level}.dsm
//! out/manifest.jsonl
//! out/config.resolved.toml
//! ```
//!
//! [`cmd_augment`] writes `images/{sample_id}.png`, `manifest.jsonl` and the
//! resolved config into its own output directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::distortion::{apply_distortion, NUM_LEVELS};
use crate::dsm::{gt_dsm, Dsm, DsmProvider, PatchRegressor};
use crate::dsmix::{dsmix_sample, LabelWeighting, MixSource};
use crate::error::{Error, Result};
use crate::image::{crop_to_multiple, load_image, save_image, ImageRgb};
use crate::label::SoftLabel;
use crate::manifest::{read_manifest, write_manifest, DistortionMeta, SampleManifest};
use crate::metrics::{plcc, srcc, ScorePairs};
use crate::nn::TinyNet;
use crate::rng;
use crate::trainkit::{
    five_patch_predict, five_patches, linear_probe, qep_train, teacher_net, ProbeHead, QepOutcome,
    QepSample,
};

pub const MANIFEST: &str = "manifest.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))
}

/// Writes the resolved config next to a command's outputs.
pub fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    cfg.save(out.join(RESOLVED_CONFIG))
}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Outcome of a command that processes files independently.
#[derive(Debug, Default)]
pub struct BatchReport {
    pub written: usize,
    pub failures: Vec<(PathBuf, Error)>,
}

impl BatchReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Distorts every reference in `refs_dir` at every selected `(type, level)`
/// and stores the images, their ground-truth maps and one manifest line each.
/// Unreadable references are reported individually; the rest are still written.
pub fn cmd_gen(cfg: &RunConfig, refs_dir: &Path, out: &Path) -> Result<BatchReport> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let paths = list_pngs(refs_dir)?;
    if paths.is_empty() {
        return Err(Error::validation(format!("no PNG files in {}", refs_dir.display())));
    }
    for dir in ["references", "distorted", "dsm"] {
        mkdir(&out.join(dir))?;
    }
    write_snapshot(cfg, out)?;

    let mut report = BatchReport::default();
    let mut refs = Vec::new();
    for path in &paths {
        match load_image(path).and_then(|img| crop_to_multiple(&img, cfg.patch_size)) {
            Ok(img) => {
                let id = stem(path);
                save_image(&img, out.join("references").join(format!("{id}.png")))?;
                refs.push((id, img));
            }
            Err(e) => report.failures.push((path.clone(), e)),
        }
    }

    let mut jobs = Vec::new();
    for (r, (id, _)) in refs.iter().enumerate() {
        for &dtype in &cfg.distortions {
            for level in 1..=NUM_LEVELS as u8 {
                jobs.push((r, id.clone(), schedule.spec(dtype, level)?));
            }
        }
    }
    let results: Vec<Result<SampleManifest>> = pool(cfg.jobs)?.install(|| {
        jobs.par_iter()
            .map(|(r, ref_id, spec)| {
                let reference = &refs[*r].1;
                let id = format!("{ref_id}_{}_{}", spec.dtype.name(), spec.level);
                let seed = rng::child_seed(cfg.seed, &format!("gen/{ref_id}"), spec.class_index() as u64);
                let dist = apply_distortion(reference, spec, seed)?;
                save_image(&dist, out.join("distorted").join(format!("{id}.png")))?;
                // Maps are taken on the quantized image actually written to disk.
                let stored = quantize(&dist);
                gt_dsm(&stored, reference, cfg.patch_size)?
                    .save(out.join("dsm").join(format!("{id}.dsm")))?;
                Ok(SampleManifest {
                    sample_id: id,
                    source_ids: vec![ref_id.clone()],
                    mask_rects: vec![],
                    lambdas: vec![1.0],
                    label: SoftLabel::one_hot(spec.class_index(), crate::distortion::CLASS_SPACE.num_classes())?,
                    seed,
                    distortion_meta: vec![DistortionMeta::distorted(spec.dtype, spec.level)],
                })
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    for (res, (_, id, spec)) in results.into_iter().zip(&jobs) {
        match res {
            Ok(m) => records.push(m),
            Err(e) => report.failures.push((
                out.join("distorted").join(format!("{id}_{}_{}.png", spec.dtype.name(), spec.level)),
                e,
            )),
        }
    }
    report.written = records.len();
    write_manifest(out.join(MANIFEST), &records)?;
    Ok(report)
}

/// Round-trips an image through 8-bit storage.
fn quantize(img: &ImageRgb) -> ImageRgb {
    ImageRgb::from_fn(img.width(), img.height(), |x, y, c| {
        (img.get(x, y, c) * 255.0).round() / 255.0
    })
    .expect("quantized values stay in range")
}

/// A generated corpus loaded back from disk.
pub struct Corpus {
    pub records: Vec<SampleManifest>,
    pub images: Vec<ImageRgb>,
    pub references: HashMap<String, ImageRgb>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_manifest(dir.join(MANIFEST))?;
        if records.is_empty() {
            return Err(Error::validation(format!("{} lists no samples", dir.join(MANIFEST).display())));
        }
        let images = records
            .iter()
            .map(|r| load_image(dir.join("distorted").join(format!("{}.png", r.sample_id))))
            .collect::<Result<Vec<_>>>()?;
        let mut references = HashMap::new();
        for r in &records {
            let id = &r.source_ids[0];
            if !references.contains_key(id) {
                let img = load_image(dir.join("references").join(format!("{id}.png")))?;
                references.insert(id.clone(), img);
            }
        }
        Ok(Self {
            records,
            images,
            references,
        })
    }
}

/// Recomputes sensitivity maps of a generated corpus with `provider`.
pub fn cmd_gen_dsm(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    provider: &DsmProvider,
    heatmaps: bool,
) -> Result<usize> {
    let corpus = Corpus::load(corpus_dir)?;
    mkdir(out)?;
    write_snapshot(cfg, out)?;
    let results: Vec<Result<()>> = pool(cfg.jobs)?.install(|| {
        corpus
            .records
            .par_iter()
            .zip(&corpus.images)
            .map(|(r, img)| {
                let reference = corpus.references.get(&r.source_ids[0]);
                let dsm = provider.predict(img, reference)?;
                dsm.save(out.join(format!("{}.dsm", r.sample_id)))?;
                if heatmaps {
                    dsm.save_heatmap(out.join(format!("{}.png", r.sample_id)))?;
                }
                Ok(())
            })
            .collect()
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(corpus.records.len())
}

/// Number of sources of augmented sample `index`, uniform on `1..=mix_max`.
pub fn draw_mix_count(seed: u64, index: u64, mix_max: usize) -> usize {
    rng::stream(seed, "augment_mix_count", index).random_range(1..=mix_max)
}

/// Produces `cfg.samples` mixed samples from a generated corpus. The pool
/// holds every distorted image plus the pristine references (class 0).
pub fn cmd_augment(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let corpus = Corpus::load(corpus_dir)?;
    let provider = cfg.dsm_provider()?;
    let num_classes = crate::distortion::CLASS_SPACE.num_classes();

    struct Entry<'a> {
        id: String,
        image: &'a ImageRgb,
        reference: &'a ImageRgb,
        label: SoftLabel,
        meta: DistortionMeta,
    }
    let mut ref_ids: Vec<&String> = corpus.references.keys().collect();
    ref_ids.sort();
    let mut entries = Vec::new();
    for id in ref_ids {
        let img = &corpus.references[id];
        entries.push(Entry {
            id: id.clone(),
            image: img,
            reference: img,
            label: SoftLabel::one_hot(0, num_classes)?,
            meta: DistortionMeta::REFERENCE,
        });
    }
    for (r, img) in corpus.records.iter().zip(&corpus.images) {
        entries.push(Entry {
            id: r.sample_id.clone(),
            image: img,
            reference: &corpus.references[&r.source_ids[0]],
            label: r.label.clone(),
            meta: r.distortion_meta[0],
        });
    }

    mkdir(&out.join("images"))?;
    write_snapshot(cfg, out)?;
    let results: Vec<Result<SampleManifest>> = pool(cfg.jobs)?.install(|| {
        (0..cfg.samples)
            .into_par_iter()
            .map(|i| {
                let mix = draw_mix_count(cfg.seed, i as u64, cfg.mix_max);
                let mut pick = rng::stream(cfg.seed, "augment_sources", i as u64);
                let base = pick.random_range(0..entries.len());
                let (w, h) = (entries[base].image.width(), entries[base].image.height());
                let compatible: Vec<usize> = (0..entries.len())
                    .filter(|&j| j != base && entries[j].image.width() == w && entries[j].image.height() == h)
                    .collect();
                let mut chosen = vec![base];
                while chosen.len() < mix.min(compatible.len() + 1) {
                    let j = compatible[pick.random_range(0..compatible.len())];
                    if !chosen.contains(&j) {
                        chosen.push(j);
                    }
                }
                let sources: Vec<MixSource<'_>> = chosen
                    .iter()
                    .map(|&j| MixSource {
                        id: &entries[j].id,
                        image: entries[j].image,
                        label: &entries[j].label,
                        meta: entries[j].meta,
                        reference: Some(entries[j].reference),
                    })
                    .collect();
                let id = format!("aug_{i:06}");
                let seed = rng::child_seed(cfg.seed, "augment_sample", i as u64);
                let sample = dsmix_sample(&id, &sources, LabelWeighting::Dsm(&provider), seed)?;
                save_image(&sample.image, out.join("images").join(format!("{id}.png")))?;
                Ok(sample.manifest)
            })
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_manifest(out.join(MANIFEST), &records)?;
    Ok(records.len())
}

/// Fits the per-patch map regressor on a generated corpus.
pub fn cmd_train_dsm_predictor(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<Vec<f64>> {
    let corpus = Corpus::load(corpus_dir)?;
    let pairs = corpus
        .records
        .iter()
        .zip(corpus.images)
        .map(|(r, img)| {
            let dsm = Dsm::load(corpus_dir.join("dsm").join(format!("{}.dsm", r.sample_id)), cfg.patch_size)?;
            Ok((img, dsm))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = PatchRegressor::zeros(cfg.patch_size);
    let history = model.train(&pairs, cfg.dsm_predictor.epochs, cfg.dsm_predictor.lr, cfg.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_snapshot(cfg, dir)?;
    }
    model.save(out)?;
    Ok(history)
}

/// Loads an augmented corpus as pre-training samples.
pub fn load_augmented(dir: &Path) -> Result<Vec<QepSample>> {
    let records = read_manifest(dir.join(MANIFEST))?;
    records
        .into_iter()
        .map(|r| {
            let image = load_image(dir.join("images").join(format!("{}.png", r.sample_id)))?;
            r.validate(image.width(), image.height())?;
            Ok(QepSample {
                is_reference: r.is_reference(),
                image,
                label: r.label,
            })
        })
        .collect()
}

/// Pre-trains a student on an augmented corpus; writes `{stem}.bin/.json`
/// and a per-epoch loss trace `{stem}.loss.csv`.
pub fn cmd_train_qep(cfg: &RunConfig, augmented_dir: &Path, out_stem: &Path) -> Result<QepOutcome> {
    cfg.validate()?;
    let corpus = load_augmented(augmented_dir)?;
    let teacher = teacher_net(cfg.seed);
    let outcome = qep_train(&corpus, &teacher, &cfg.qep_config())?;
    if let Some(dir) = out_stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_snapshot(cfg, dir)?;
    }
    outcome.student.save(out_stem)?;
    let mut trace = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        trace.push_str(&format!("{i},{l}\n"));
    }
    let trace_path = out_stem.with_extension("loss.csv");
    std::fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;
    Ok(outcome)
}

/// `(image path, score)` rows of a CSV with header `path,score`; relative
/// paths resolve against the CSV's directory.
pub fn read_labeled_csv(path: &Path) -> Result<Vec<(PathBuf, f64)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(Error::validation(format!("{}: row {} needs path,score", path.display(), i + 2)));
        }
        let score: f64 = rec[1]
            .parse()
            .map_err(|_| Error::validation(format!("{}: row {}: bad score `{}`", path.display(), i + 2, &rec[1])))?;
        out.push((base.join(&rec[0]), score));
    }
    Ok(out)
}

/// Loads a frozen encoder from `{stem}.bin/.json`.
pub fn load_encoder(stem: &Path) -> Result<TinyNet> {
    let mut net = TinyNet::load(stem)?;
    net.set_frozen(true);
    Ok(net)
}

/// Trains a probe on the five crops of every labeled image.
pub fn cmd_probe(cfg: &RunConfig, encoder_stem: &Path, labeled_csv: &Path, out: &Path) -> Result<ProbeHead> {
    cfg.validate()?;
    let encoder = load_encoder(encoder_stem)?;
    let mut labeled = Vec::new();
    for (path, score) in read_labeled_csv(labeled_csv)? {
        for crop in five_patches(&load_image(&path)?, cfg.probe.crop)? {
            labeled.push((crop, score));
        }
    }
    let head = linear_probe(&encoder, &labeled, &cfg.probe_config())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_snapshot(cfg, dir)?;
    }
    head.save(out)?;
    Ok(head)
}

/// Five-crop scores for each image.
pub fn cmd_predict(encoder_stem: &Path, probe: &Path, images: &[PathBuf], crop: usize) -> Result<Vec<f64>> {
    let encoder = load_encoder(encoder_stem)?;
    let head = ProbeHead::load(probe)?;
    images
        .iter()
        .map(|p| five_patch_predict(&encoder, &head, &load_image(p)?, crop))
        .collect()
}

/// SRCC and PLCC of a `gt,pred` CSV.
pub fn cmd_eval(csv_path: &Path) -> Result<(f64, f64)> {
    let pairs = ScorePairs::from_csv(csv_path)?;
    Ok((srcc(&pairs)?, plcc(&pairs)?))
}
