use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::numerics::Tensor;

/// Geometry and generation knobs of the synthetic talking puppet.
///
/// A frame is a `grid` image with a rectangular head of `skin` intensity
/// that sways horizontally by whole pixels. Mouth pixels add the frame's
/// speech amplitude on top of the skin while Speaking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PuppetSpec {
    pub grid: (usize, usize),
    pub head_rows: (usize, usize),
    pub head_cols: (usize, usize),
    pub mouth_rows: (usize, usize),
    pub mouth_cols: (usize, usize),
    pub eye_row: usize,
    pub skin: f64,
    /// Peak horizontal head offset in pixels.
    pub sway_amplitude: f64,
    pub sway_period: f64,
    /// Audio tokens per frame.
    pub audio_rate: usize,
    pub audio_dim: usize,
    pub audio_noise: f64,
    pub frames: usize,
    /// Seed of the fixed amplitude-to-audio projection shared by a dataset.
    pub seed: u64,
}

impl Default for PuppetSpec {
    fn default() -> Self {
        PuppetSpec {
            grid: (16, 16),
            head_rows: (3, 15),
            head_cols: (4, 12),
            mouth_rows: (10, 12),
            mouth_cols: (6, 10),
            eye_row: 6,
            skin: 0.4,
            sway_amplitude: 1.5,
            sway_period: 10.0,
            audio_rate: 2,
            audio_dim: 8,
            audio_noise: 0.02,
            frames: 21,
            seed: 0,
        }
    }
}

impl PuppetSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        let bad = |m: String| Err(Error::Configuration(m));
        let reach = self.sway_amplitude.abs().round() as usize;
        let ok_range = |(a, b): (usize, usize), n: usize| a < b && b <= n;
        if !ok_range(self.head_rows, h) || !ok_range(self.head_cols, w) {
            return bad(format!("head outside {h}x{w} grid"));
        }
        if self.head_cols.0 < reach || self.head_cols.1 + reach > w {
            return bad("sway moves the head off the grid".into());
        }
        if !ok_range(self.mouth_rows, h)
            || self.mouth_rows.0 < self.head_rows.0
            || self.mouth_rows.1 > self.head_rows.1
        {
            return bad("mouth rows must lie inside the head".into());
        }
        if !ok_range(self.mouth_cols, w)
            || self.mouth_cols.0 < self.head_cols.0
            || self.mouth_cols.1 > self.head_cols.1
        {
            return bad("mouth columns must lie inside the head".into());
        }
        if self.eye_row < self.head_rows.0
            || self.eye_row >= self.head_rows.1
            || (self.mouth_rows.0..self.mouth_rows.1).contains(&self.eye_row)
        {
            return bad("eye row must be inside the head and off the mouth".into());
        }
        if self.frames == 0 || self.audio_rate == 0 || self.audio_dim == 0 {
            return bad("frames, audio_rate and audio_dim must be positive".into());
        }
        if !(self.sway_period > 0.0) {
            return bad("sway_period must be positive".into());
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        self.head_cols.1 - self.head_cols.0
    }

    fn mouth_width(&self) -> usize {
        self.mouth_cols.1 - self.mouth_cols.0
    }

    /// Fixed projection from amplitude to audio features, `[audio_rate, audio_dim]`.
    pub fn audio_projection(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xA0D1_0000);
        Tensor::randn(&[self.audio_rate, self.audio_dim], 1.0, &mut rng)
    }

    /// Integer head offset at `frame` for a clip with sway phase `phase`.
    pub fn sway(&self, frame: usize, phase: f64) -> i64 {
        let a = 2.0 * std::f64::consts::PI * frame as f64 / self.sway_period + phase;
        (self.sway_amplitude * a.sin()).round() as i64
    }
}

/// One synthetic clip with its generative ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `[F, H, W]`.
    pub frames: Tensor,
    /// `[F, audio_rate, audio_dim]`.
    pub audio: Tensor,
    pub modes: Vec<Mode>,
    pub amplitude: Vec<f64>,
    pub phase: f64,
    pub seed: u64,
}

/// Render one frame. `open` is the mouth intensity above skin (0 = closed).
pub fn render_frame(spec: &PuppetSpec, shift: i64, open: f64) -> Vec<f64> {
    let (h, w) = spec.grid;
    let mut px = vec![0.0; h * w];
    let col = |c: usize| (c as i64 + shift) as usize;
    for r in spec.head_rows.0..spec.head_rows.1 {
        for c in spec.head_cols.0..spec.head_cols.1 {
            px[r * w + col(c)] = spec.skin;
        }
    }
    let eyes = [spec.head_cols.0 + 1, spec.head_cols.1 - 2];
    for c in eyes {
        px[spec.eye_row * w + col(c)] = 1.0;
    }
    for r in spec.mouth_rows.0..spec.mouth_rows.1 {
        for c in spec.mouth_cols.0..spec.mouth_cols.1 {
            px[r * w + col(c)] = spec.skin + open;
        }
    }
    px
}

fn envelope(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n + 2).map(|_| rng.random::<f64>()).collect();
    (0..n)
        .map(|i| 0.1 + 0.9 * (raw[i] + raw[i + 1] + raw[i + 2]) / 3.0)
        .collect()
}

/// Generate a clip. `modes` must have `spec.frames` entries.
pub fn generate_clip(spec: &PuppetSpec, seed: u64, modes: &[Mode]) -> Result<Clip> {
    spec.validate()?;
    if modes.len() != spec.frames {
        return Err(Error::Conditioning(format!(
            "{} mode flags for {} frames",
            modes.len(),
            spec.frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amplitude = envelope(&mut rng, spec.frames);
    let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    let (h, w) = spec.grid;
    let mut frames = Vec::with_capacity(spec.frames * h * w);
    for (f, (&a, &m)) in amplitude.iter().zip(modes).enumerate() {
        let open = if m == Mode::Speaking { a } else { 0.0 };
        frames.extend(render_frame(spec, spec.sway(f, phase), open));
    }
    let proj = spec.audio_projection();
    let per = spec.audio_rate * spec.audio_dim;
    let mut audio = Vec::with_capacity(spec.frames * per);
    for &a in &amplitude {
        for &p in proj.data() {
            let n: f64 = rng.sample(StandardNormal);
            audio.push(a * p + spec.audio_noise * n);
        }
    }
    Ok(Clip {
        frames: Tensor::new(vec![spec.frames, h, w], frames)?,
        audio: Tensor::new(vec![spec.frames, spec.audio_rate, spec.audio_dim], audio)?,
        modes: modes.to_vec(),
        amplitude,
        phase,
        seed,
    })
}

/// Mouth intensity above skin for one `[H, W]` frame.
///
/// Uses full-row sums over the mouth rows, so a horizontal head shift that
/// keeps the head on the grid does not change the result.
pub fn mouth_openness(frame: &[f64], spec: &PuppetSpec) -> f64 {
    let w = spec.grid.1;
    let rows = spec.mouth_rows.1 - spec.mouth_rows.0;
    let total: f64 = (spec.mouth_rows.0..spec.mouth_rows.1)
        .map(|r| frame[r * w..(r + 1) * w].iter().sum::<f64>())
        .sum();
    let baseline = spec.skin * (rows * spec.head_width()) as f64;
    (total - baseline) / (rows * spec.mouth_width()) as f64
}

/// Openness of every frame of `[F, H, W]`.
pub fn openness_track(frames: &Tensor, spec: &PuppetSpec) -> Result<Vec<f64>> {
    let s = frames.shape();
    if s.len() != 3 || (s[1], s[2]) != spec.grid {
        return Err(Error::dim(format!("frames {s:?} for grid {:?}", spec.grid)));
    }
    let per = s[1] * s[2];
    Ok(frames
        .data()
        .chunks_exact(per)
        .map(|f| mouth_openness(f, spec))
        .collect())
}

/// Pearson correlation; constant input is an error.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::dim(format!("correlation of {} and {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let scale_a = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let scale_b = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if saa.sqrt() <= 1e-12 * scale_a * n || sbb.sqrt() <= 1e-12 * scale_b * n {
        return Err(Error::UndefinedCorrelation("constant sequence".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Correlation of amplitude and mouth openness over the Speaking frames.
pub fn sync_score(frames: &Tensor, amplitude: &[f64], modes: &[Mode], spec: &PuppetSpec) -> Result<f64> {
    segment_score(frames, amplitude, modes, Mode::Speaking, spec)
}

/// Correlation of amplitude and mouth openness over frames in `mode`.
pub fn segment_score(
    frames: &Tensor,
    amplitude: &[f64],
    modes: &[Mode],
    mode: Mode,
    spec: &PuppetSpec,
) -> Result<f64> {
    let open = openness_track(frames, spec)?;
    if open.len() != amplitude.len() || open.len() != modes.len() {
        return Err(Error::dim(format!(
            "{} frames, {} amplitudes, {} modes",
            open.len(),
            amplitude.len(),
            modes.len()
        )));
    }
    let (a, o): (Vec<f64>, Vec<f64>) = modes
        .iter()
        .zip(amplitude.iter().zip(&open))
        .filter(|(m, _)| **m == mode)
        .map(|(_, (a, o))| (*a, *o))
        .unzip();
    if a.len() < 8 {
        return Err(Error::contract(format!(
            "sync score needs at least 8 {mode:?} frames, got {}",
            a.len()
        )));
    }
    pearson(&a, &o)
}

/// Random per-clip mode pattern: all Speaking, or one Silence run that
/// leaves at least `min_speaking` Speaking frames.
pub fn random_modes(rng: &mut impl Rng, frames: usize, silence_prob: f64, min_speaking: usize) -> Vec<Mode> {
    let mut modes = vec![Mode::Speaking; frames];
    if frames > min_speaking && rng.random::<f64>() < silence_prob {
        let len = rng.random_range(1..=frames - min_speaking);
        let start = rng.random_range(0..=frames - len);
        modes[start..start + len].fill(Mode::Silence);
    }
    modes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speaking(n: usize) -> Vec<Mode> {
        vec![Mode::Speaking; n]
    }

    #[test]
    fn silence_keeps_mouth_closed() {
        let spec = PuppetSpec::default();
        let c = generate_clip(&spec, 4, &vec![Mode::Silence; 21]).unwrap();
        for o in openness_track(&c.frames, &spec).unwrap() {
            assert!(o.abs() < 1e-9);
        }
    }

    #[test]
    fn still_puppet_repeats_frames() {
        let spec = PuppetSpec {
            sway_amplitude: 0.0,
            ..PuppetSpec::default()
        };
        let a = render_frame(&spec, spec.sway(3, 1.0), 0.5);
        let b = render_frame(&spec, spec.sway(17, 1.0), 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn openness_recovers_amplitude_under_sway() {
        let spec = PuppetSpec::default();
        let c = generate_clip(&spec, 9, &speaking(21)).unwrap();
        let open = openness_track(&c.frames, &spec).unwrap();
        let shifts: std::collections::BTreeSet<i64> = (0..21).map(|f| spec.sway(f, c.phase)).collect();
        assert!(shifts.len() > 1);
        for (o, a) in open.iter().zip(&c.amplitude) {
            assert!((o - a).abs() < 1e-12);
        }
        assert!(sync_score(&c.frames, &c.amplitude, &c.modes, &spec).unwrap() > 0.999);
    }

    #[test]
    fn negated_amplitude_negates_score() {
        let spec = PuppetSpec::default();
        let c = generate_clip(&spec, 10, &speaking(21)).unwrap();
        let s = sync_score(&c.frames, &c.amplitude, &c.modes, &spec).unwrap();
        let neg: Vec<f64> = c.amplitude.iter().map(|a| -a).collect();
        let n = sync_score(&c.frames, &neg, &c.modes, &spec).unwrap();
        assert_eq!(n, -s);
    }

    #[test]
    fn shuffled_frames_lose_sync() {
        use rand::seq::SliceRandom;
        let spec = PuppetSpec::default();
        let mut low = 0;
        for seed in 0..100 {
            let c = generate_clip(&spec, seed, &speaking(21)).unwrap();
            let mut amp = c.amplitude.clone();
            amp.shuffle(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
            let s = sync_score(&c.frames, &amp, &c.modes, &spec).unwrap();
            if s.abs() < 0.5 {
                low += 1;
            }
        }
        assert!(low >= 95, "{low}/100");
    }

    #[test]
    fn openness_is_monotone_in_amplitude() {
        let spec = PuppetSpec::default();
        let o: Vec<f64> = [0.1, 0.3, 0.6, 0.9]
            .iter()
            .map(|&a| mouth_openness(&render_frame(&spec, 1, a), &spec))
            .collect();
        assert!(o.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn constant_sequence_is_undefined() {
        assert!(matches!(
            pearson(&[1.0; 9], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn silence_frames_match_zero_amplitude_render() {
        let spec = PuppetSpec::default();
        let mut modes = speaking(21);
        modes[5..12].fill(Mode::Silence);
        let c = generate_clip(&spec, 3, &modes).unwrap();
        for f in 5..12 {
            let want = render_frame(&spec, spec.sway(f, c.phase), 0.0);
            assert_eq!(&c.frames.data()[f * 256..(f + 1) * 256], &want[..]);
        }
    }

    #[test]
    fn clip_is_deterministic() {
        let spec = PuppetSpec::default();
        let a = generate_clip(&spec, 77, &speaking(21)).unwrap();
        let b = generate_clip(&spec, 77, &speaking(21)).unwrap();
        assert_eq!(a, b);
    }
}
