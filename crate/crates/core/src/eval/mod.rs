//! Perceptual evaluation of fitted reconstructions on triplet datasets.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{Manifest, TripletSample};
use crate::error::{Error, Result};
use crate::io;
use crate::loss::{Discriminator, Embedding, ReferenceEmbedder};
use crate::model::{CoefficientVector, LossWeights, MorphableBasis, Segment, POSE_DIM};
use crate::pipeline::{fit_naive, fit_robust_batch, FitConfig, FitSession};
use crate::render::{render_face, Camera, Image};

/// Which degraded image is evaluated and whether coefficients are swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Occluded images of a different capture; expression, lighting and
    /// pose are taken from the guiding fit.
    RealUnpaired,
    /// Occluded images of the guiding capture itself.
    SyntheticPaired,
    /// Noisy images of the guiding capture.
    Noise,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::RealUnpaired => "real_unpaired",
            Protocol::SyntheticPaired => "synthetic_paired",
            Protocol::Noise => "noise",
        }
    }

    pub fn swaps(self) -> bool {
        self == Protocol::RealUnpaired
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real_unpaired" => Ok(Protocol::RealUnpaired),
            "synthetic_paired" => Ok(Protocol::SyntheticPaired),
            "noise" => Ok(Protocol::Noise),
            _ => Err(Error::invalid(format!(
                "unknown protocol {s:?} (expected real_unpaired, synthetic_paired or noise)"
            ))),
        }
    }
}

/// How the degraded image's coefficients are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fitter {
    /// Fit the degraded image directly.
    Naive,
    /// Guidance fit on the clean image, then the robust fit.
    Rogue,
}

impl Fitter {
    pub fn as_str(self) -> &'static str {
        match self {
            Fitter::Naive => "naive",
            Fitter::Rogue => "rogue",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderSource {
    Reference { seed: u64 },
    /// CSV of `key,v1,...,vn` rows, keys being image paths.
    External { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub fitter: Fitter,
    pub embedder: EmbedderSource,
    /// Start every fit from the ground-truth guiding coefficients.
    pub warm_start: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::SyntheticPaired,
            fitter: Fitter::Rogue,
            embedder: EmbedderSource::Reference { seed: 1 },
            warm_start: false,
        }
    }
}

/// Maps images to unit-norm embeddings. `key` names the image's file when
/// it has one.
pub trait Embedder: Sync {
    fn embed(&self, image: &Image, key: Option<&str>) -> Result<Embedding>;
}

impl Embedder for ReferenceEmbedder {
    fn embed(&self, image: &Image, _key: Option<&str>) -> Result<Embedding> {
        ReferenceEmbedder::embed(self, image)
    }
}

/// Precomputed embeddings looked up by key.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbedder {
    table: HashMap<String, Embedding>,
}

impl ExternalEmbedder {
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut table = HashMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                context: "embeddings".into(),
                offset: e.position().map_or(0, |p| p.byte() as usize),
                message: e.to_string(),
            })?;
            let offset = rec.position().map_or(0, |p| p.byte() as usize);
            let bad = |m: &str| Error::Parse {
                context: format!("embeddings line {}", line + 1),
                offset,
                message: m.to_string(),
            };
            let key = rec.get(0).ok_or_else(|| bad("empty record"))?.to_string();
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<Vec<_>>>()?;
            let e = Embedding::from_unnormalized(values).map_err(|_| bad("zero embedding"))?;
            table.insert(key, e);
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&String::from_utf8_lossy(&io::read_bytes(path)?))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Embedder for ExternalEmbedder {
    fn embed(&self, _image: &Image, key: Option<&str>) -> Result<Embedding> {
        let key = key.ok_or_else(|| Error::invalid("external embeddings need an image key"))?;
        self.table
            .get(key)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no precomputed embedding for {key}")))
    }
}

/// Builds the embedder an [`EvalConfig`] names; relative external paths
/// are resolved against `base`.
pub fn make_embedder(src: &EmbedderSource, base: &Path) -> Result<Box<dyn Embedder>> {
    Ok(match src {
        EmbedderSource::Reference { seed } => Box::new(ReferenceEmbedder::new(*seed)),
        EmbedderSource::External { path } => Box::new(ExternalEmbedder::load(&base.join(path))?),
    })
}

/// Shape and texture from `degraded`; expression, illumination and pose
/// from `guiding`.
pub fn swap_coefficients(degraded: &CoefficientVector, guiding: &CoefficientVector) -> CoefficientVector {
    let mut out = degraded.clone();
    let pose_start = Segment::Illumination.range().end;
    for r in [
        Segment::Expression.range(),
        Segment::Illumination.range(),
        pose_start..pose_start + POSE_DIM,
    ] {
        out.as_mut_slice()[r.clone()].copy_from_slice(&guiding.as_slice()[r]);
    }
    out
}

fn distance_keyed(
    embedder: &dyn Embedder,
    a: &Image,
    ka: Option<&str>,
    b: &Image,
    kb: Option<&str>,
) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::invalid("images differ in size"));
    }
    Ok(embedder.embed(a, ka)?.distance(&embedder.embed(b, kb)?))
}

/// Euclidean distance between the two images' embeddings, in `[0, 2]`.
pub fn perceptual_distance(embedder: &dyn Embedder, a: &Image, b: &Image) -> Result<f64> {
    distance_keyed(embedder, a, None, b, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub id: String,
    pub identity: usize,
    pub sample: usize,
    pub distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub fitter: Fitter,
    pub swap: bool,
    pub config_hash: String,
    pub samples: Vec<SampleResult>,
    /// Mean distance per identity, over its successful samples.
    pub identity_means: BTreeMap<usize, f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub failures: usize,
}

impl EvalReport {
    /// Aggregates per-sample results; failed samples are counted but do
    /// not enter the statistics.
    pub fn from_samples(
        protocol: Protocol,
        fitter: Fitter,
        config_hash: String,
        samples: Vec<SampleResult>,
    ) -> Self {
        let ok: Vec<f64> = samples.iter().filter_map(|s| s.distance).collect();
        let n = ok.len() as f64;
        let (mean, std) = if ok.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let mean = ok.iter().sum::<f64>() / n;
            let var = ok.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let mut per: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &samples {
            if let Some(d) = s.distance {
                let e = per.entry(s.identity).or_default();
                e.0 += d;
                e.1 += 1;
            }
        }
        Self {
            protocol,
            fitter,
            swap: protocol.swaps(),
            config_hash,
            failures: samples.len() - ok.len(),
            identity_means: per.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
            samples,
            mean,
            std,
        }
    }

    pub fn succeeded(&self) -> usize {
        self.samples.len() - self.failures
    }

    /// One row per sample: `id,identity,sample,distance,error`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["id", "identity", "sample", "distance", "error"])
            .map_err(err)?;
        for s in &self.samples {
            w.write_record([
                s.id.clone(),
                s.identity.to_string(),
                s.sample.to_string(),
                s.distance.map_or(String::new(), |d| d.to_string()),
                s.error.clone().unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
    }

    /// TOML summary of the aggregate statistics.
    pub fn summary_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            protocol: &'a str,
            fitter: &'a str,
            swap: bool,
            config_hash: &'a str,
            samples: usize,
            succeeded: usize,
            failures: usize,
            mean: f64,
            std: f64,
            identity_means: BTreeMap<String, f64>,
        }
        let s = Summary {
            protocol: self.protocol.as_str(),
            fitter: self.fitter.as_str(),
            swap: self.swap,
            config_hash: &self.config_hash,
            samples: self.samples.len(),
            succeeded: self.succeeded(),
            failures: self.failures,
            mean: self.mean,
            std: self.std,
            identity_means: self
                .identity_means
                .iter()
                .map(|(k, v)| (format!("{k:03}"), *v))
                .collect(),
        };
        toml::to_string(&s).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything fixed across one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub basis: Arc<MorphableBasis>,
    pub camera: Camera,
    pub weights: LossWeights,
    pub fit: FitConfig,
    pub eval: EvalConfig,
    pub config_hash: String,
}

/// Report plus the rendered `I_O'` of every successful sample, keyed by
/// [`render_key`].
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub renders: Vec<(String, Image)>,
}

/// Relative path under which a sample's evaluation render is stored.
pub fn render_key(id: &str) -> String {
    format!("renders/{id}.ppm")
}

fn degraded_image(protocol: Protocol, s: &TripletSample) -> &Image {
    match protocol {
        Protocol::Noise => &s.noisy,
        Protocol::RealUnpaired | Protocol::SyntheticPaired => &s.occluded,
    }
}

fn start_point(setup: &EvalSetup, s: &TripletSample) -> Result<Option<CoefficientVector>> {
    if !setup.eval.warm_start {
        return Ok(None);
    }
    s.guiding_truth
        .clone()
        .map(Some)
        .ok_or_else(|| Error::invalid("warm start needs ground-truth guiding coefficients"))
}

fn session(setup: &EvalSetup, s: &TripletSample, protocol: Protocol) -> Result<FitSession> {
    let mut sess = FitSession::new(
        setup.basis.clone(),
        setup.camera,
        setup.weights,
        setup.fit,
        s.guiding.clone(),
    )?;
    if let Some(l) = &s.guiding_landmarks {
        sess = sess.with_landmarks(l.clone());
    }
    if let Some(c) = start_point(setup, s)? {
        sess = sess.with_initial_guiding(c);
    }
    let degraded = degraded_image(protocol, s).clone();
    Ok(match protocol {
        Protocol::Noise => sess.with_degraded(None, Some(degraded)),
        _ => sess.with_degraded(Some(degraded), None),
    })
}

/// `(C_G, C_O)` for every sample; errors stay per sample.
fn fit_all(setup: &EvalSetup, samples: &[TripletSample]) -> Vec<Result<(CoefficientVector, CoefficientVector)>> {
    let protocol = setup.eval.protocol;
    let mut sessions: Vec<Result<FitSession>> = samples
        .par_iter()
        .map(|s| {
            let mut sess = session(setup, s, protocol)?;
            sess.fit_guidance()?;
            Ok(sess)
        })
        .collect();
    match setup.eval.fitter {
        Fitter::Naive => sessions
            .into_par_iter()
            .zip(samples)
            .map(|(sess, s)| {
                let sess = sess?;
                let mut naive = FitSession::new(
                    setup.basis.clone(),
                    setup.camera,
                    setup.weights,
                    setup.fit,
                    degraded_image(protocol, s).clone(),
                )?;
                if let Some(c) = start_point(setup, s)? {
                    naive = naive.with_initial_guiding(c);
                }
                let c_o = naive.fit_guidance()?;
                Ok((sess.c_g, c_o))
            })
            .collect(),
        Fitter::Rogue => {
            let idx: Vec<usize> = (0..sessions.len()).filter(|&i| sessions[i].is_ok()).collect();
            let mut batch: Vec<FitSession> = idx
                .iter()
                .map(|&i| sessions[i].as_ref().expect("filtered").clone())
                .collect();
            let mut disc = Discriminator::new(setup.fit.seed);
            let batch_ok = !batch.is_empty() && fit_robust_batch(&mut batch, &mut disc).is_ok();
            if batch_ok {
                for (&i, b) in idx.iter().zip(batch) {
                    sessions[i] = Ok(b);
                }
            } else {
                // isolate the failing samples
                sessions.par_iter_mut().for_each(|s| {
                    if let Ok(sess) = s {
                        if let Err(e) = sess.fit_robust() {
                            *s = Err(e);
                        }
                    }
                });
            }
            sessions
                .into_iter()
                .map(|s| {
                    let s = s?;
                    let c_o = if protocol == Protocol::Noise { s.c_n } else { s.c_o };
                    Ok((s.c_g, c_o))
                })
                .collect()
        }
    }
}

/// Runs the evaluation loop: fit `C_G` and `C_O`, swap for the unpaired
/// protocol, render `C_O'` over the guiding image and compare it with the
/// guiding image.
pub fn evaluate_dataset(
    setup: &EvalSetup,
    manifest: &Manifest,
    samples: &[TripletSample],
    embedder: &dyn Embedder,
) -> Result<EvalRun> {
    setup.weights.validate()?;
    setup.fit.validate()?;
    if manifest.samples.len() != samples.len() {
        return Err(Error::invalid("manifest and sample list differ in length"));
    }
    let protocol = setup.eval.protocol;
    let fits = fit_all(setup, samples);
    let outcomes: Vec<Result<(f64, Image)>> = fits
        .into_par_iter()
        .zip(samples.par_iter().zip(&manifest.samples))
        .map(|(fit, (s, rec))| {
            let (c_g, c_o) = fit?;
            let c = if protocol.swaps() {
                swap_coefficients(&c_o, &c_g)
            } else {
                c_o
            };
            let img = render_face(&setup.basis, &c, &setup.camera, Some(&s.guiding))?.to_image();
            let key = render_key(&rec.id);
            let d = distance_keyed(embedder, &s.guiding, Some(&rec.guiding), &img, Some(&key))?;
            Ok((d, img))
        })
        .collect();
    let mut results = Vec::with_capacity(samples.len());
    let mut renders = Vec::new();
    for (o, rec) in outcomes.into_iter().zip(&manifest.samples) {
        let (distance, error) = match o {
            Ok((d, img)) => {
                renders.push((render_key(&rec.id), img));
                (Some(d), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        results.push(SampleResult {
            id: rec.id.clone(),
            identity: rec.identity,
            sample: rec.sample,
            distance,
            error,
        });
    }
    Ok(EvalRun {
        report: EvalReport::from_samples(
            protocol,
            setup.eval.fitter,
            setup.config_hash.clone(),
            results,
        ),
        renders,
    })
}

/// Naive fit of one image, exposed for baselines.
pub fn naive_fit(setup: &EvalSetup, image: &Image) -> Result<CoefficientVector> {
    Ok(fit_naive(setup.basis.clone(), setup.camera, setup.weights, setup.fit, image.clone())?.0)
}
