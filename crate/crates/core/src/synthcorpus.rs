//! Synthetic multilingual corpus with known phoneme-viseme ground truth.
//!
//! A universe of well-separated phoneme and viseme archetype vectors is
//! shared by every language; languages differ only in which phoneme subset
//! they use and in their Markov transition structure. Each utterance carries
//! four time-aligned views: phoneme ids, noisy speech features, noisy visual
//! features, and lip landmarks (plus rasterized frames) rendered from the
//! corresponding viseme's mouth shape. Because the phoneme-to-viseme
//! correspondence is a recorded bijection, alignment recovery and zero-shot
//! transfer are directly checkable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{FrameSequence, FRAME_PIXELS, FRAME_SIDE};
use crate::metrics::{AnchorMap, LandmarkSequence, Role, DEFAULT_ANCHORS, LANDMARK_COUNT};
use crate::seeds::{derive_seed, rng_for};

/// Frames over which a viseme change interpolates to its new mouth shape.
pub const TRANSITION_FRAMES: usize = 3;

/// Shared archetype vectors, their mouth shapes, and the ground-truth
/// phoneme-to-viseme bijection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub k_true: usize,
    pub d_p: usize,
    pub d_v: usize,
    /// Row-major k_true x d_p.
    pub phoneme_archetypes: Vec<f64>,
    /// Row-major k_true x d_v.
    pub viseme_archetypes: Vec<f64>,
    /// (width, height) of each viseme's mouth ellipse.
    pub mouth_params: Vec<(f64, f64)>,
    /// Ground truth: phoneme id -> viseme id.
    pub correspondence: Vec<usize>,
    pub seed: u64,
}

impl Universe {
    pub fn phoneme_archetype(&self, id: usize) -> &[f64] {
        &self.phoneme_archetypes[id * self.d_p..(id + 1) * self.d_p]
    }

    pub fn viseme_archetype(&self, id: usize) -> &[f64] {
        &self.viseme_archetypes[id * self.d_v..(id + 1) * self.d_v]
    }
}

#[cfg(test)]
fn min_pairwise_distance(rows: &[f64], n: usize, dim: usize) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in (a + 1)..n {
            let mut d2 = 0.0;
            for j in 0..dim {
                let d = rows[a * dim + j] - rows[b * dim + j];
                d2 += d * d;
            }
            best = best.min(d2.sqrt());
        }
    }
    best
}

fn draw_separated(
    rng: &mut rand_chacha::ChaCha12Rng,
    k: usize,
    dim: usize,
    min_dist: f64,
) -> Result<Vec<f64>> {
    let mut rows: Vec<f64> = Vec::with_capacity(k * dim);
    for slot in 0..k {
        let mut placed = false;
        for _attempt in 0..1000 {
            let cand: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let ok = (0..slot).all(|prev| {
                let mut d2 = 0.0;
                for j in 0..dim {
                    let d = cand[j] - rows[prev * dim + j];
                    d2 += d * d;
                }
                d2.sqrt() >= min_dist
            });
            if ok {
                rows.extend_from_slice(&cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not separate archetype {slot} by {min_dist:.3} in 1000 draws; \
                 lower K_true or the noise level"
            )));
        }
    }
    Ok(rows)
}

/// Draw archetypes separated by at least six noise standard deviations and a
/// seeded bijective phoneme-to-viseme correspondence.
pub fn make_universe(
    k_true: usize,
    d_p: usize,
    d_v: usize,
    sigma_p: f64,
    sigma_v: f64,
    seed: u64,
) -> Result<Universe> {
    if k_true < 2 {
        return Err(Error::invalid("universe needs K_true >= 2"));
    }
    if sigma_p < 0.0 || sigma_v < 0.0 {
        return Err(Error::invalid("noise levels must be >= 0"));
    }
    let mut rng = rng_for(seed, "universe", 0);
    let phoneme_archetypes = draw_separated(&mut rng, k_true, d_p, 6.0 * sigma_p)?;
    let viseme_archetypes = draw_separated(&mut rng, k_true, d_v, 6.0 * sigma_v)?;

    let mouth_params: Vec<(f64, f64)> = (0..k_true)
        .map(|_| (rng.gen_range(1.2..2.4), rng.gen_range(0.4..1.6)))
        .collect();

    let mut correspondence: Vec<usize> = (0..k_true).collect();
    correspondence.shuffle(&mut rng);

    Ok(Universe {
        k_true,
        d_p,
        d_v,
        phoneme_archetypes,
        viseme_archetypes,
        mouth_params,
        correspondence,
        seed,
    })
}

/// One language: a phoneme subset of the universe plus Markov transition
/// structure over that subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    /// Global phoneme ids used by this language.
    pub phoneme_subset: Vec<usize>,
    /// Row-stochastic, subset-indexed, row-major n x n.
    pub transition: Vec<f64>,
    pub utterance_len: usize,
    pub utterance_count: usize,
    pub sigma_p: f64,
    pub sigma_v: f64,
    pub seed: u64,
}

impl LanguageSpec {
    pub fn validate(&self, universe: &Universe) -> Result<()> {
        if self.phoneme_subset.is_empty() {
            return Err(Error::invalid(format!("language {} has empty subset", self.name)));
        }
        if self.phoneme_subset.iter().any(|&id| id >= universe.k_true) {
            return Err(Error::invalid(format!(
                "language {} uses phonemes outside the universe",
                self.name
            )));
        }
        let n = self.phoneme_subset.len();
        if self.transition.len() != n * n {
            return Err(Error::dim("transition matrix", n * n, self.transition.len()));
        }
        for r in 0..n {
            let row_sum: f64 = self.transition[r * n..(r + 1) * n].iter().sum();
            if (row_sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "language {} transition row {r} sums to {row_sum}",
                    self.name
                )));
            }
        }
        if self.sigma_p < 0.0 || self.sigma_v < 0.0 {
            return Err(Error::invalid("noise levels must be >= 0"));
        }
        if self.utterance_len < 2 {
            return Err(Error::invalid("utterances need T >= 2"));
        }
        Ok(())
    }
}

/// Four time-aligned views of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub phoneme_ids: Vec<usize>,
    /// T x d_p flat.
    pub z_p: Vec<f64>,
    /// T x d_v flat.
    pub z_v: Vec<f64>,
    pub landmarks: LandmarkSequence,
    pub frames: FrameSequence,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }

    pub fn z_p_at(&self, t: usize, d_p: usize) -> &[f64] {
        &self.z_p[t * d_p..(t + 1) * d_p]
    }

    pub fn z_v_at(&self, t: usize, d_v: usize) -> &[f64] {
        &self.z_v[t * d_v..(t + 1) * d_v]
    }
}

/// 26 points around an ellipse of the given width/height; indices 0, 6, 13,
/// 19 are snapped to the exact right/top/left/bottom extrema so the anchor
/// distances equal the mouth parameters exactly.
fn ellipse_points(width: f64, height: f64) -> [f64; LANDMARK_COUNT * 2] {
    let mut pts = [0.0; LANDMARK_COUNT * 2];
    let (a, b) = (width / 2.0, height / 2.0);
    for i in 0..LANDMARK_COUNT {
        let theta = match i {
            0 => 0.0,
            6 => std::f64::consts::FRAC_PI_2,
            13 => std::f64::consts::PI,
            19 => 1.5 * std::f64::consts::PI,
            _ => 2.0 * std::f64::consts::PI * i as f64 / LANDMARK_COUNT as f64,
        };
        pts[i * 2] = a * theta.cos();
        pts[i * 2 + 1] = b * theta.sin();
    }
    pts
}

pub const RENDER_ANCHORS: AnchorMap = DEFAULT_ANCHORS;

/// Static landmark sequence for a single mouth shape.
pub fn render_landmarks(width: f64, height: f64, t: usize) -> Result<LandmarkSequence> {
    render_landmark_series(&vec![(width, height); t])
}

/// Landmark sequence for per-frame mouth parameters.
pub fn render_landmark_series(params: &[(f64, f64)]) -> Result<LandmarkSequence> {
    if params.is_empty() {
        return Err(Error::invalid("render needs at least one frame"));
    }
    if params.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0) {
        return Err(Error::invalid("mouth width/height must be positive"));
    }
    let mut coords = Vec::with_capacity(params.len() * LANDMARK_COUNT * 2);
    for &(w, h) in params {
        coords.extend_from_slice(&ellipse_points(w, h));
    }
    LandmarkSequence::new(coords, params.len(), 25.0, RENDER_ANCHORS, Role::Real)
}

/// Rasterize mouth ellipses into 16x16 grayscale frames with a soft edge.
fn rasterize(params: &[(f64, f64)]) -> FrameSequence {
    let mut frames = Vec::with_capacity(params.len() * FRAME_PIXELS);
    let extent = 1.5; // world half-width covered by the raster
    let sharp = 6.0;
    for &(w, h) in params {
        let (a, b) = (w / 2.0, h / 2.0);
        for r in 0..FRAME_SIDE {
            for c in 0..FRAME_SIDE {
                let x = -extent + 2.0 * extent * (c as f64 + 0.5) / FRAME_SIDE as f64;
                let y = -extent + 2.0 * extent * (r as f64 + 0.5) / FRAME_SIDE as f64;
                let rho = ((x / a) * (x / a) + (y / b) * (y / b)).sqrt();
                frames.push(crate::diffcore::tape::sigmoid(sharp * (1.0 - rho)));
            }
        }
    }
    FrameSequence::new(frames, params.len()).expect("raster stays in [0,1]")
}

/// Per-frame mouth parameters for a viseme id sequence: each change
/// interpolates from the previously rendered shape to the new target over
/// three frames.
pub fn viseme_mouth_series(viseme_ids: &[usize], universe: &Universe) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(viseme_ids.len());
    let mut run_start = 0usize;
    let mut start_shape = universe.mouth_params[viseme_ids[0]];
    for t in 0..viseme_ids.len() {
        if t > 0 && viseme_ids[t] != viseme_ids[t - 1] {
            run_start = t;
            start_shape = out[t - 1];
        }
        let target = universe.mouth_params[viseme_ids[t]];
        let age = t - run_start;
        let frac = if t == run_start && t == 0 {
            1.0
        } else {
            ((age + 1) as f64 / TRANSITION_FRAMES as f64).min(1.0)
        };
        out.push((
            start_shape.0 + frac * (target.0 - start_shape.0),
            start_shape.1 + frac * (target.1 - start_shape.1),
        ));
    }
    out
}

fn smooth_mouth_params(ids: &[usize], universe: &Universe) -> Vec<(f64, f64)> {
    let viseme_ids: Vec<usize> = ids.iter().map(|&id| universe.correspondence[id]).collect();
    viseme_mouth_series(&viseme_ids, universe)
}

fn generate_utterance(spec: &LanguageSpec, universe: &Universe, index: u64) -> Utterance {
    let mut rng = rng_for(spec.seed, "utterance", index);
    let n = spec.phoneme_subset.len();
    let t_len = spec.utterance_len;

    let mut local = rng.gen_range(0..n);
    let mut ids = Vec::with_capacity(t_len);
    ids.push(spec.phoneme_subset[local]);
    for _ in 1..t_len {
        let row = &spec.transition[local * n..(local + 1) * n];
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut next = n - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        local = next;
        ids.push(spec.phoneme_subset[local]);
    }

    let mut z_p = Vec::with_capacity(t_len * universe.d_p);
    let mut z_v = Vec::with_capacity(t_len * universe.d_v);
    for &id in &ids {
        let pa = universe.phoneme_archetype(id);
        for j in 0..universe.d_p {
            let noise: f64 = rng.sample(StandardNormal);
            z_p.push(pa[j] + spec.sigma_p * noise);
        }
        let va = universe.viseme_archetype(universe.correspondence[id]);
        for j in 0..universe.d_v {
            let noise: f64 = rng.sample(StandardNormal);
            z_v.push(va[j] + spec.sigma_v * noise);
        }
    }

    let params = smooth_mouth_params(&ids, universe);
    let landmarks = render_landmark_series(&params).expect("positive mouth params");
    let frames = rasterize(&params);

    Utterance {
        phoneme_ids: ids,
        z_p,
        z_v,
        landmarks,
        frames,
    }
}

/// All utterances of one language, deterministically derived from its seed.
pub fn generate_language(spec: &LanguageSpec, universe: &Universe) -> Result<Vec<Utterance>> {
    spec.validate(universe)?;
    Ok((0..spec.utterance_count)
        .map(|i| generate_utterance(spec, universe, i as u64))
        .collect())
}

#[derive(Debug, Clone)]
pub struct Language {
    pub spec: LanguageSpec,
    pub utterances: Vec<Utterance>,
}

/// Generation parameters for a full corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub k_true: usize,
    pub d_p: usize,
    pub d_v: usize,
    pub sigma_p: f64,
    pub sigma_v: f64,
    pub languages: usize,
    pub utterances_per_language: usize,
    pub utterance_len: usize,
    pub unseen_languages: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            k_true: 8,
            d_p: 16,
            d_v: 12,
            sigma_p: 0.5,
            sigma_v: 0.5,
            languages: 5,
            utterances_per_language: 200,
            utterance_len: 50,
            unseen_languages: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub universe: Universe,
    pub languages: Vec<Language>,
    pub unseen_names: Vec<String>,
}

impl Corpus {
    pub fn seen(&self) -> Vec<&Language> {
        self.languages
            .iter()
            .filter(|l| !self.unseen_names.contains(&l.spec.name))
            .collect()
    }

    pub fn unseen(&self) -> Vec<&Language> {
        self.languages
            .iter()
            .filter(|l| self.unseen_names.contains(&l.spec.name))
            .collect()
    }
}

/// Each language drops one rotating phoneme from the universe (so seen
/// languages jointly cover every phoneme) and gets a seeded self-biased
/// transition matrix.
fn language_spec_for(corpus: &CorpusSpec, index: usize) -> LanguageSpec {
    let lang_seed = derive_seed(corpus.seed, "language", index as u64);
    let dropped = index % corpus.k_true;
    let subset: Vec<usize> = (0..corpus.k_true).filter(|&k| k != dropped).collect();
    let n = subset.len();

    let mut rng = rng_for(lang_seed, "transition", 0);
    let self_stay = 0.65;
    let mut transition = vec![0.0; n * n];
    for r in 0..n {
        let mut weights: Vec<f64> = (0..n)
            .map(|c| if c == r { 0.0 } else { rng.gen_range(0.2..1.0) })
            .collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w *= (1.0 - self_stay) / total;
        }
        weights[r] = self_stay;
        transition[r * n..(r + 1) * n].copy_from_slice(&weights);
    }

    LanguageSpec {
        name: format!("lang{index}"),
        phoneme_subset: subset,
        transition,
        utterance_len: corpus.utterance_len,
        utterance_count: corpus.utterances_per_language,
        sigma_p: corpus.sigma_p,
        sigma_v: corpus.sigma_v,
        seed: lang_seed,
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.unseen_languages >= spec.languages {
        return Err(Error::invalid("need at least one seen language"));
    }
    let universe = make_universe(spec.k_true, spec.d_p, spec.d_v, spec.sigma_p, spec.sigma_v, spec.seed)?;
    let mut languages = Vec::with_capacity(spec.languages);
    for i in 0..spec.languages {
        let lang_spec = language_spec_for(spec, i);
        let utterances = generate_language(&lang_spec, &universe)?;
        languages.push(Language {
            spec: lang_spec,
            utterances,
        });
    }
    let unseen_names: Vec<String> = (spec.languages - spec.unseen_languages..spec.languages)
        .map(|i| format!("lang{i}"))
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        universe,
        languages,
        unseen_names,
    })
}

/// Disjoint train / zero-shot partition by language name. Zero-shot
/// languages must draw their phonemes from the shared universe.
pub fn split_seen_unseen<'a>(
    languages: &'a [Language],
    unseen_names: &[String],
    universe: &Universe,
) -> Result<(Vec<&'a Language>, Vec<&'a Language>)> {
    for name in unseen_names {
        if !languages.iter().any(|l| &l.spec.name == name) {
            return Err(Error::invalid(format!("unknown unseen language {name}")));
        }
    }
    let mut train = Vec::new();
    let mut zero_shot = Vec::new();
    for lang in languages {
        if unseen_names.contains(&lang.spec.name) {
            lang.spec.validate(universe)?;
            zero_shot.push(lang);
        } else {
            train.push(lang);
        }
    }
    Ok((train, zero_shot))
}

// ---------------------------------------------------------------------------
// Disk layout
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct UtteranceFeatures {
    phoneme_ids: Vec<usize>,
    z_p: Vec<Vec<f64>>,
    z_v: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    /// Path -> sha256, sorted by path.
    pub files: BTreeMap<String, String>,
    pub corpus_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write the corpus under `dir` (one directory per language) and a manifest
/// with per-file content hashes.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let record = |files: &mut BTreeMap<String, String>, root: &Path, path: &Path| -> Result<()> {
        let rel = path
            .strip_prefix(root)
            .expect("path under corpus dir")
            .to_string_lossy()
            .replace('\\', "/");
        let bytes = std::fs::read(path)?;
        files.insert(rel, sha256_hex(&bytes));
        Ok(())
    };

    let universe_path = dir.join("universe.json");
    std::fs::write(&universe_path, serde_json::to_string_pretty(&corpus.universe)?)?;
    record(&mut files, dir, &universe_path)?;

    let unseen_path = dir.join("unseen.json");
    std::fs::write(&unseen_path, serde_json::to_string_pretty(&corpus.unseen_names)?)?;
    record(&mut files, dir, &unseen_path)?;

    for lang in &corpus.languages {
        let lang_dir = dir.join("languages").join(&lang.spec.name);
        std::fs::create_dir_all(&lang_dir)?;
        let spec_path = lang_dir.join("spec.json");
        std::fs::write(&spec_path, serde_json::to_string_pretty(&lang.spec)?)?;
        record(&mut files, dir, &spec_path)?;

        for (i, utt) in lang.utterances.iter().enumerate() {
            let stem = format!("utt_{i:04}");
            let features = UtteranceFeatures {
                phoneme_ids: utt.phoneme_ids.clone(),
                z_p: utt.z_p.chunks(corpus.universe.d_p).map(|c| c.to_vec()).collect(),
                z_v: utt.z_v.chunks(corpus.universe.d_v).map(|c| c.to_vec()).collect(),
            };
            let feat_path = lang_dir.join(format!("{stem}.features.json"));
            std::fs::write(&feat_path, serde_json::to_string(&features)?)?;
            record(&mut files, dir, &feat_path)?;

            let lm_path = lang_dir.join(format!("{stem}.landmarks.json"));
            utt.landmarks.save(&lm_path)?;
            record(&mut files, dir, &lm_path)?;

            let frame_base = lang_dir.join(format!("{stem}.frames"));
            utt.frames.save(&frame_base)?;
            record(&mut files, dir, &frame_base.with_extension("json"))?;
            record(&mut files, dir, &frame_base.with_extension("bin"))?;
        }
    }

    let mut roll = String::new();
    for (path, hash) in &files {
        roll.push_str(path);
        roll.push(':');
        roll.push_str(hash);
        roll.push('\n');
    }
    let manifest = Manifest {
        spec: corpus.spec.clone(),
        files,
        corpus_sha256: sha256_hex(roll.as_bytes()),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Load a corpus written by [`write_corpus`], revalidating every view.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let universe: Universe =
        serde_json::from_str(&std::fs::read_to_string(dir.join("universe.json"))?)?;
    let unseen_names: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("unseen.json"))?)?;

    let mut languages = Vec::new();
    for i in 0..manifest.spec.languages {
        let lang_dir: PathBuf = dir.join("languages").join(format!("lang{i}"));
        let spec: LanguageSpec =
            serde_json::from_str(&std::fs::read_to_string(lang_dir.join("spec.json"))?)?;
        spec.validate(&universe)?;
        let mut utterances = Vec::with_capacity(spec.utterance_count);
        for u in 0..spec.utterance_count {
            let stem = format!("utt_{u:04}");
            let features: UtteranceFeatures = serde_json::from_str(&std::fs::read_to_string(
                lang_dir.join(format!("{stem}.features.json")),
            )?)?;
            let landmarks =
                LandmarkSequence::load(&lang_dir.join(format!("{stem}.landmarks.json")), Role::Real)?;
            let frames = FrameSequence::load(&lang_dir.join(format!("{stem}.frames")))?;
            let t = features.phoneme_ids.len();
            if landmarks.t != t || frames.t != t {
                return Err(Error::invalid(format!(
                    "utterance {stem} of lang{i} has inconsistent view lengths"
                )));
            }
            utterances.push(Utterance {
                phoneme_ids: features.phoneme_ids,
                z_p: features.z_p.into_iter().flatten().collect(),
                z_v: features.z_v.into_iter().flatten().collect(),
                landmarks,
                frames,
            });
        }
        languages.push(Language { spec, utterances });
    }

    Ok(Corpus {
        spec: manifest.spec,
        universe,
        languages,
        unseen_names,
    })
}
