//! Lip-sync evaluation metrics over 26-point lip landmark sequences.
//!
//! LSE-D is the temporal mean of per-frame mean landmark distances (lower is
//! better). TMDC is the mean Pearson correlation of five scale-invariant
//! mouth feature series — width, height, hull area, aspect ratio, openness —
//! between real and generated sequences (higher is better).

use std::io::Write as IoWrite;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 26;
pub const MOUTH_FEATURE_COUNT: usize = 5;
pub const MOUTH_EPS: f64 = 1e-8;

/// Indices of the four named anchor landmarks within the 26-point set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorMap {
    pub left: usize,
    pub right: usize,
    pub top: usize,
    pub bottom: usize,
}

impl AnchorMap {
    pub fn validate(&self) -> Result<()> {
        for (name, i) in [
            ("left", self.left),
            ("right", self.right),
            ("top", self.top),
            ("bottom", self.bottom),
        ] {
            if i >= LANDMARK_COUNT {
                return Err(Error::invalid(format!("anchor {name} index {i} out of range")));
            }
        }
        if self.left == self.right {
            return Err(Error::invalid("left and right anchors must differ"));
        }
        Ok(())
    }
}

/// Default anchor placement used by the corpus renderer: right at index 0,
/// top at 6, left at 13, bottom at 19 (extrema of the ellipse sampling).
pub const DEFAULT_ANCHORS: AnchorMap = AnchorMap {
    left: 13,
    right: 0,
    top: 6,
    bottom: 19,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Real,
    Generated,
}

/// T frames of 26 (x, y) lip landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    /// Flat T x 26 x 2, frame-major.
    pub coords: Vec<f64>,
    pub t: usize,
    pub fps: f64,
    pub anchors: AnchorMap,
    pub role: Role,
}

impl LandmarkSequence {
    pub fn new(coords: Vec<f64>, t: usize, fps: f64, anchors: AnchorMap, role: Role) -> Result<Self> {
        let seq = LandmarkSequence { coords, t, fps, anchors, role };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        if self.coords.len() != self.t * LANDMARK_COUNT * 2 {
            return Err(Error::dim(
                "landmark coords",
                self.t * LANDMARK_COUNT * 2,
                self.coords.len(),
            ));
        }
        if let Some(i) = self.coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("landmark coordinate {i}")));
        }
        Ok(())
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.coords[t * LANDMARK_COUNT * 2..(t + 1) * LANDMARK_COUNT * 2]
    }

    pub fn point(&self, t: usize, i: usize) -> (f64, f64) {
        let base = t * LANDMARK_COUNT * 2 + i * 2;
        (self.coords[base], self.coords[base + 1])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = LandmarkFile::from(self);
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path, role: Role) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        let file: LandmarkFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        file.into_sequence(role, path)
    }
}

/// On-disk JSON form: `{"fps": .., "anchors": {..}, "frames": [[[x,y]; 26]; T]}`.
#[derive(Serialize, Deserialize)]
struct LandmarkFile {
    fps: f64,
    anchors: AnchorMap,
    frames: Vec<Vec<[f64; 2]>>,
}

impl From<&LandmarkSequence> for LandmarkFile {
    fn from(seq: &LandmarkSequence) -> Self {
        let frames = (0..seq.t)
            .map(|t| {
                (0..LANDMARK_COUNT)
                    .map(|i| {
                        let (x, y) = seq.point(t, i);
                        [x, y]
                    })
                    .collect()
            })
            .collect();
        LandmarkFile {
            fps: seq.fps,
            anchors: seq.anchors,
            frames,
        }
    }
}

impl LandmarkFile {
    fn into_sequence(self, role: Role, path: &Path) -> Result<LandmarkSequence> {
        let t = self.frames.len();
        let mut coords = Vec::with_capacity(t * LANDMARK_COUNT * 2);
        for (idx, frame) in self.frames.iter().enumerate() {
            if frame.len() != LANDMARK_COUNT {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    detail: format!("frame {idx} has {} landmarks, want {LANDMARK_COUNT}", frame.len()),
                });
            }
            for p in frame {
                coords.push(p[0]);
                coords.push(p[1]);
            }
        }
        LandmarkSequence::new(coords, t, self.fps, self.anchors, role)
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

/// Per frame: translate the lip centroid to the origin and scale so the
/// left-right anchor distance is 1. Idempotent and invariant to input
/// translation and scale.
pub fn normalize_landmarks(seq: &LandmarkSequence) -> Result<LandmarkSequence> {
    let mut out = seq.clone();
    for t in 0..seq.t {
        let frame = seq.frame(t);
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..LANDMARK_COUNT {
            cx += frame[i * 2];
            cy += frame[i * 2 + 1];
        }
        cx /= LANDMARK_COUNT as f64;
        cy /= LANDMARK_COUNT as f64;

        let width = dist(seq.point(t, seq.anchors.left), seq.point(t, seq.anchors.right));
        if width < 1e-12 {
            return Err(Error::invalid(format!("zero-width frame {t} cannot be normalized")));
        }
        let inv = 1.0 / width;
        let base = t * LANDMARK_COUNT * 2;
        for i in 0..LANDMARK_COUNT {
            out.coords[base + i * 2] = (frame[i * 2] - cx) * inv;
            out.coords[base + i * 2 + 1] = (frame[i * 2 + 1] - cy) * inv;
        }
    }
    Ok(out)
}

/// Temporal mean of per-frame mean landmark distances, on the coordinates as
/// given (normalize first if you want scale invariance).
pub fn lse_d(real: &LandmarkSequence, gen: &LandmarkSequence) -> Result<f64> {
    if real.t != gen.t {
        return Err(Error::dim("lse_d frames", real.t, gen.t));
    }
    if real.t == 0 {
        return Err(Error::invalid("lse_d needs at least one frame"));
    }
    let mut total = 0.0;
    for t in 0..real.t {
        let mut frame_sum = 0.0;
        for i in 0..LANDMARK_COUNT {
            frame_sum += dist(real.point(t, i), gen.point(t, i));
        }
        total += frame_sum / LANDMARK_COUNT as f64;
    }
    Ok(total / real.t as f64)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull area via monotone chain plus the shoelace formula. Collinear
/// or degenerate point sets have area 0.
pub fn convex_hull_area(points: &[(f64, f64)]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return 0.0;
    }

    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);

    let hull = lower;
    if hull.len() < 3 {
        return 0.0;
    }
    let mut area = 0.0;
    for i in 0..hull.len() {
        let (x1, y1) = hull[i];
        let (x2, y2) = hull[(i + 1) % hull.len()];
        area += x1 * y2 - x2 * y1;
    }
    (area / 2.0).abs()
}

/// Five scale-invariant mouth feature series, row-major 5 x T in the order
/// width, height, area, aspect ratio, openness.
#[derive(Debug, Clone, PartialEq)]
pub struct MouthFeatureSeries {
    pub values: Vec<f64>,
    pub t: usize,
}

impl MouthFeatureSeries {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.t..(k + 1) * self.t]
    }
}

pub const MOUTH_FEATURE_NAMES: [&str; MOUTH_FEATURE_COUNT] =
    ["width", "height", "area", "aspect_ratio", "openness"];

pub fn mouth_features(seq: &LandmarkSequence) -> Result<MouthFeatureSeries> {
    seq.validate()?;
    let t_len = seq.t;
    let mut values = vec![0.0; MOUTH_FEATURE_COUNT * t_len];
    for t in 0..t_len {
        let width = dist(seq.point(t, seq.anchors.left), seq.point(t, seq.anchors.right));
        let height = dist(seq.point(t, seq.anchors.top), seq.point(t, seq.anchors.bottom));
        let points: Vec<(f64, f64)> = (0..LANDMARK_COUNT).map(|i| seq.point(t, i)).collect();
        let area = convex_hull_area(&points);
        values[t] = width;
        values[t_len + t] = height;
        values[2 * t_len + t] = area;
        values[3 * t_len + t] = width / (height + MOUTH_EPS);
        values[4 * t_len + t] = height / (width + MOUTH_EPS);
    }
    Ok(MouthFeatureSeries { values, t: t_len })
}

/// Standard centered Pearson correlation, clamped into [-1, 1]. A series
/// with zero variance yields 0 by convention (rigid mouths score nothing).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson series", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs T >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("pearson: zero-variance series, returning 0");
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// TMDC plus the five per-feature correlations that it averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmdcBreakdown {
    pub r: [f64; MOUTH_FEATURE_COUNT],
    pub tmdc: f64,
}

pub fn tmdc_breakdown(real: &LandmarkSequence, gen: &LandmarkSequence) -> Result<TmdcBreakdown> {
    if real.t != gen.t {
        return Err(Error::dim("tmdc frames", real.t, gen.t));
    }
    if real.t < 2 {
        return Err(Error::invalid("tmdc needs T >= 2"));
    }
    let fr = mouth_features(real)?;
    let fg = mouth_features(gen)?;
    let mut r = [0.0; MOUTH_FEATURE_COUNT];
    for k in 0..MOUTH_FEATURE_COUNT {
        r[k] = pearson(fr.row(k), fg.row(k))?;
    }
    let tmdc = r.iter().sum::<f64>() / MOUTH_FEATURE_COUNT as f64;
    Ok(TmdcBreakdown { r, tmdc })
}

/// Mean of the five feature-wise Pearson correlations.
pub fn tmdc(real: &LandmarkSequence, gen: &LandmarkSequence) -> Result<f64> {
    Ok(tmdc_breakdown(real, gen)?.tmdc)
}

/// One metrics CSV row per evaluated pair.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub id: String,
    pub lse_d: f64,
    pub tmdc: f64,
    pub r: [f64; MOUTH_FEATURE_COUNT],
}

pub fn write_metrics_csv<W: IoWrite>(out: &mut W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "id,lse_d,tmdc,r_width,r_height,r_area,r_aspect_ratio,r_openness")?;
    for row in rows {
        write!(out, "{},{},{}", row.id, row.lse_d, row.tmdc)?;
        for r in row.r {
            write!(out, ",{r}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_seq(t: usize, seed: u64, role: Role) -> LandmarkSequence {
        let mut rng = rng_for(seed, "lm", 0);
        let coords: Vec<f64> = (0..t * LANDMARK_COUNT * 2)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        LandmarkSequence::new(coords, t, 25.0, DEFAULT_ANCHORS, role).unwrap()
    }

    /// Mouth-shaped sequence: points on an ellipse whose width and height
    /// both vary over time, so all five features have variance.
    fn mouth_seq(t: usize, phase: f64, role: Role) -> LandmarkSequence {
        let mut coords = Vec::new();
        for ti in 0..t {
            let w = 1.2 + 0.3 * ((ti as f64 * 0.9 + phase).cos());
            let h = 0.6 + 0.4 * ((ti as f64 * 0.7 + phase).sin());
            for i in 0..LANDMARK_COUNT {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / LANDMARK_COUNT as f64;
                coords.push(w * theta.cos());
                coords.push(h * theta.sin());
            }
        }
        LandmarkSequence::new(coords, t, 25.0, AnchorMap { left: 13, right: 0, top: 6, bottom: 19 }, role)
            .unwrap()
    }

    #[test]
    fn lse_d_of_identical_sequences_is_zero() {
        let a = random_seq(4, 1, Role::Real);
        let mut b = a.clone();
        b.role = Role::Generated;
        assert_eq!(lse_d(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn uniform_shift_gives_exact_norm() {
        let a = random_seq(4, 2, Role::Real);
        let mut b = a.clone();
        for i in 0..b.coords.len() {
            b.coords[i] += if i % 2 == 0 { 3.0 } else { 4.0 };
        }
        assert_eq!(lse_d(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn lse_d_matches_two_loop_oracle() {
        let a = random_seq(4, 3, Role::Real);
        let b = random_seq(4, 4, Role::Generated);
        let got = lse_d(&a, &b).unwrap();
        let mut outer = 0.0;
        for t in 0..4 {
            let mut inner = 0.0;
            for i in 0..LANDMARK_COUNT {
                let (x1, y1) = a.point(t, i);
                let (x2, y2) = b.point(t, i);
                inner += ((x1 - x2).powi(2) + (y1 - y2).powi(2)).sqrt();
            }
            outer += inner / 26.0;
        }
        let want = outer / 4.0;
        assert!((got - want).abs() < 1e-12);
        let c = random_seq(3, 5, Role::Generated);
        assert!(lse_d(&a, &c).is_err());
    }

    #[test]
    fn lse_d_is_symmetric_with_triangle_bound() {
        let a = random_seq(5, 6, Role::Real);
        let b = random_seq(5, 7, Role::Generated);
        let c = random_seq(5, 8, Role::Generated);
        assert_eq!(lse_d(&a, &b).unwrap(), lse_d(&b, &a).unwrap());
        assert!(lse_d(&a, &c).unwrap() <= lse_d(&a, &b).unwrap() + lse_d(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn normalization_properties() {
        let a = mouth_seq(3, 0.0, Role::Real);
        let n1 = normalize_landmarks(&a).unwrap();
        let n2 = normalize_landmarks(&n1).unwrap();
        for (x, y) in n1.coords.iter().zip(n2.coords.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // translation invariance
        let mut shifted = a.clone();
        for i in 0..shifted.coords.len() {
            shifted.coords[i] += if i % 2 == 0 { 7.0 } else { -3.0 };
        }
        let ns = normalize_landmarks(&shifted).unwrap();
        for (x, y) in n1.coords.iter().zip(ns.coords.iter()) {
            assert!((x - y).abs() < 1e-9);
        }

        // scale invariance
        let mut scaled = a.clone();
        for v in scaled.coords.iter_mut() {
            *v *= 2.0;
        }
        let nc = normalize_landmarks(&scaled).unwrap();
        for (x, y) in n1.coords.iter().zip(nc.coords.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_width_frame_is_rejected_with_index() {
        let mut a = mouth_seq(2, 0.0, Role::Real);
        // collapse frame 1 onto a single point
        let base = LANDMARK_COUNT * 2;
        for i in 0..LANDMARK_COUNT * 2 {
            a.coords[base + i] = 0.0;
        }
        let err = normalize_landmarks(&a).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
    }

    #[test]
    fn unit_square_hull_area() {
        let mut points = vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let mut rng = rng_for(10, "hull", 0);
        for _ in 0..22 {
            points.push((rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)));
        }
        assert!((convex_hull_area(&points) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_hulls_have_zero_area() {
        assert_eq!(convex_hull_area(&[(2.0, 3.0); 26]), 0.0);
        let collinear: Vec<(f64, f64)> = (0..26).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert_eq!(convex_hull_area(&collinear), 0.0);
    }

    /// Gift-wrapping hull oracle, written independently of monotone chain.
    fn jarvis_hull_area(points: &[(f64, f64)]) -> f64 {
        let mut distinct = points.to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if distinct.len() < 3 {
            return 0.0;
        }
        let start = distinct
            .iter()
            .copied()
            .min_by(|a, b| a.partial_cmp(b).unwrap())
            .unwrap();
        let mut hull = vec![start];
        loop {
            let cur = *hull.last().unwrap();
            let mut cand = distinct[0];
            if cand == cur {
                cand = distinct[1];
            }
            for &p in &distinct {
                if p == cur {
                    continue;
                }
                let c = cross(cur, cand, p);
                let further = c == 0.0
                    && (p.0 - cur.0).hypot(p.1 - cur.1) > (cand.0 - cur.0).hypot(cand.1 - cur.1);
                if c > 0.0 || further {
                    cand = p;
                }
            }
            if cand == start {
                break;
            }
            hull.push(cand);
            if hull.len() > distinct.len() {
                break; // numeric safety, should not happen
            }
        }
        if hull.len() < 3 {
            return 0.0;
        }
        let mut area = 0.0;
        for i in 0..hull.len() {
            let (x1, y1) = hull[i];
            let (x2, y2) = hull[(i + 1) % hull.len()];
            area += x1 * y2 - x2 * y1;
        }
        (area / 2.0).abs()
    }

    #[test]
    fn hull_matches_gift_wrapping_oracle() {
        let mut rng = rng_for(11, "hull2", 0);
        for _ in 0..300 {
            let points: Vec<(f64, f64)> = (0..LANDMARK_COUNT)
                .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                .collect();
            let a = convex_hull_area(&points);
            let b = jarvis_hull_area(&points);
            assert!((a - b).abs() < 1e-9 * (1.0 + b), "{a} vs {b}");
        }
    }

    #[test]
    fn mouth_features_symmetric_case() {
        // left (0,0), right (2,0), top (1,1), bottom (1,-1)
        let mut coords = vec![0.0; LANDMARK_COUNT * 2];
        let anchors = AnchorMap { left: 0, right: 1, top: 2, bottom: 3 };
        coords[0] = 0.0;
        coords[1] = 0.0;
        coords[2] = 2.0;
        coords[3] = 0.0;
        coords[4] = 1.0;
        coords[5] = 1.0;
        coords[6] = 1.0;
        coords[7] = -1.0;
        // remaining points inside the quad
        for i in 4..LANDMARK_COUNT {
            coords[i * 2] = 1.0;
            coords[i * 2 + 1] = 0.0;
        }
        let seq = LandmarkSequence::new(coords, 1, 25.0, anchors, Role::Real).unwrap();
        let f = mouth_features(&seq).unwrap();
        assert_eq!(f.row(0)[0], 2.0);
        assert_eq!(f.row(1)[0], 2.0);
        assert!((f.row(3)[0] - 1.0).abs() < 1e-7);
        assert!((f.row(4)[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn closed_mouth_guards_divisions() {
        let mut coords = vec![0.0; LANDMARK_COUNT * 2];
        let anchors = AnchorMap { left: 0, right: 1, top: 2, bottom: 2 };
        coords[2] = 3.0; // right at (3, 0); top == bottom at origin
        let seq = LandmarkSequence::new(coords, 1, 25.0, anchors, Role::Real).unwrap();
        let f = mouth_features(&seq).unwrap();
        assert_eq!(f.row(1)[0], 0.0);
        assert!(f.row(3)[0].is_finite() && f.row(3)[0] > 1e7); // width / eps
        assert_eq!(f.row(4)[0], 0.0);
    }

    #[test]
    fn aspect_times_openness_is_one_for_open_mouths() {
        let seq = mouth_seq(6, 0.3, Role::Real);
        let f = mouth_features(&seq).unwrap();
        for t in 0..6 {
            let prod = f.row(3)[t] * f.row(4)[t];
            assert!((prod - 1.0).abs() < 1e-6, "t={t}: {prod}");
        }
    }

    #[test]
    fn pearson_basics() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn tmdc_of_identical_nonconstant_sequences_is_one() {
        let a = mouth_seq(8, 0.0, Role::Real);
        let mut b = a.clone();
        b.role = Role::Generated;
        let v = tmdc(&a, &b).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn tmdc_is_affine_invariant_per_feature_row() {
        // scaling all generated coordinates scales width/height/area rows by
        // positive factors and leaves the ratios fixed: every row is a
        // positive affine image, so TMDC stays exactly 1
        let a = mouth_seq(8, 0.0, Role::Real);
        let mut b = a.clone();
        for v in b.coords.iter_mut() {
            *v *= 3.5;
        }
        let v = tmdc(&a, &b).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    /// Mouth sequence with seeded random widths/heights per frame.
    fn random_mouth_seq(t: usize, seed: u64, role: Role) -> LandmarkSequence {
        let mut rng = rng_for(seed, "rmouth", 0);
        let mut coords = Vec::new();
        for _ in 0..t {
            let w = rng.gen_range(0.8..2.0);
            let h = rng.gen_range(0.3..1.2);
            for i in 0..LANDMARK_COUNT {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / LANDMARK_COUNT as f64;
                coords.push(0.5 * w * theta.cos());
                coords.push(0.5 * h * theta.sin());
            }
        }
        LandmarkSequence::new(coords, t, 25.0, AnchorMap { left: 13, right: 0, top: 6, bottom: 19 }, role)
            .unwrap()
    }

    #[test]
    fn independent_sequences_have_small_tmdc() {
        // seeded Monte-Carlo null: two independently drawn mouth sequences
        let a = random_mouth_seq(500, 101, Role::Real);
        let b = random_mouth_seq(500, 202, Role::Generated);
        let v = tmdc(&a, &b).unwrap();
        assert!(v.abs() < 0.15, "{v}");
    }

    #[test]
    fn landmark_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let a = mouth_seq(3, 0.5, Role::Real);
        let path = dir.path().join("lm.json");
        a.save(&path).unwrap();
        let b = LandmarkSequence::load(&path, Role::Real).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn metrics_csv_shape() {
        let rows = vec![MetricsRow {
            id: "u0".into(),
            lse_d: 0.25,
            tmdc: 0.9,
            r: [1.0, 0.9, 0.8, 0.7, 0.6],
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("id,lse_d,tmdc"));
        assert!(lines[1].starts_with("u0,0.25,0.9,1,0.9"));
    }

    proptest! {
        #[test]
        fn hull_area_never_negative(
            raw in proptest::collection::vec(-5.0f64..5.0, LANDMARK_COUNT * 2)
        ) {
            let points: Vec<(f64, f64)> = raw.chunks(2).map(|c| (c[0], c[1])).collect();
            prop_assert!(convex_hull_area(&points) >= 0.0);
        }

        #[test]
        fn pearson_stays_in_unit_interval(
            x in proptest::collection::vec(-10.0f64..10.0, 8),
            y in proptest::collection::vec(-10.0f64..10.0, 8),
        ) {
            let r = pearson(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
