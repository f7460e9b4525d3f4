//! Synthetic ghosted / deghosted image pairs.
//!
//! A primary image is a sum of linear and hyperbolic events, each a Ricker
//! wavelet along the time (row) axis. The ghosted input adds a delayed copy
//! scaled by the ghost coefficient: `X = Y + rho * shift_tau(Y)`.

mod io;

pub use io::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Linear,
    Hyperbolic,
}

/// One seismic-like event.
///
/// Linear: arrival row `t0 + dip * (col - x0)`.
/// Hyperbolic: arrival row `sqrt(t0^2 + ((col - x0) / dip)^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub t0: f64,
    pub x0: f64,
    pub dip: f64,
    pub amplitude: f64,
}

impl Event {
    pub fn flat(row: f64, amplitude: f64) -> Self {
        Event {
            kind: EventKind::Linear,
            t0: row,
            x0: 0.0,
            dip: 0.0,
            amplitude,
        }
    }

    fn arrival(&self, col: f64) -> f64 {
        match self.kind {
            EventKind::Linear => self.t0 + self.dip * (col - self.x0),
            EventKind::Hyperbolic => {
                let u = (col - self.x0) / self.dip;
                (self.t0 * self.t0 + u * u).sqrt()
            }
        }
    }
}

/// Zero-phase Ricker wavelet `(1 - 2u^2) exp(-u^2)`, `u = t / width`.
pub fn ricker(t: f64, width: f64) -> f64 {
    let u2 = (t / width) * (t / width);
    (1.0 - 2.0 * u2) * (-u2).exp()
}

/// Half-length in rows beyond which the wavelet is treated as zero.
pub fn wavelet_support(width: f64) -> usize {
    (4.0 * width).ceil() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostParams {
    pub delay: usize,
    pub coefficient: f64,
}

impl GhostParams {
    /// Recovers the delay and coefficient from a pair by least squares over
    /// all admissible delays. `None` when no delay explains `x - y`.
    pub fn estimate(x: &Image, y: &Image) -> Option<GhostParams> {
        let (_, h, _) = y.chw().ok()?;
        let d = x.sub(y).ok()?;
        let dd: f64 = d.data().iter().map(|v| v * v).sum();
        let mut best: Option<(f64, GhostParams)> = None;
        for delay in 1..h {
            let s = shift_rows(y, delay).ok()?;
            let ss: f64 = s.data().iter().map(|v| v * v).sum();
            if ss == 0.0 {
                continue;
            }
            let ds: f64 = d.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
            let rho = ds / ss;
            let resid = dd - rho * ds;
            if best.map_or(true, |(r, _)| resid < r) {
                best = Some((resid, GhostParams { delay, coefficient: rho }));
            }
        }
        let (resid, g) = best?;
        (resid <= 1e-6 * dd.max(f64::MIN_POSITIVE)).then_some(g)
    }
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive event count range.
    pub events: (usize, usize),
    pub kinds: Vec<EventKind>,
    /// Ricker width in pixels.
    pub wavelet_width: f64,
    pub amplitude: (f64, f64),
    /// Inclusive ghost delay range in rows.
    pub delay: (usize, usize),
    pub ghost_coefficient: f64,
    /// Standard deviation of noise added to targets only.
    pub noise: f64,
    pub seed: u64,
}

impl Default for EventSpec {
    fn default() -> Self {
        EventSpec {
            height: 64,
            width: 64,
            events: (2, 6),
            kinds: vec![EventKind::Linear, EventKind::Hyperbolic],
            wavelet_width: 2.0,
            amplitude: (-1.0, 1.0),
            delay: (4, 7),
            ghost_coefficient: -1.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Clean values are rescaled into `[-AMPLITUDE_BOUND, AMPLITUDE_BOUND]`.
pub const AMPLITUDE_BOUND: f64 = 1.5;

impl EventSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("event-spec", m));
        let (h, w) = (self.height, self.width);
        if h == 0 || w == 0 {
            return bad(format!("empty extents {h}x{w}"));
        }
        if self.events.0 < 1 || self.events.0 > self.events.1 {
            return bad(format!("event count range {:?}", self.events));
        }
        if self.kinds.is_empty() {
            return bad("no event kinds".into());
        }
        if !(self.wavelet_width > 0.0) {
            return bad(format!("wavelet width {}", self.wavelet_width));
        }
        let (a0, a1) = self.amplitude;
        if !(a0 <= a1 && a0 >= -1.0 && a1 <= 1.0) {
            return bad(format!("amplitude range {:?} not inside [-1, 1]", self.amplitude));
        }
        let (d0, d1) = self.delay;
        if d0 < 1 || d0 > d1 || 4 * d1 >= h {
            return bad(format!(
                "ghost delay range {:?} must satisfy 1 <= tau < h/4 = {}",
                self.delay,
                h as f64 / 4.0
            ));
        }
        if !(self.ghost_coefficient.abs() <= 1.0) {
            return bad(format!("ghost coefficient {}", self.ghost_coefficient));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise level {}", self.noise));
        }
        let support = wavelet_support(self.wavelet_width);
        if h < 4 * support {
            return bad(format!(
                "height {h} too small for wavelet support {support} (need >= {})",
                4 * support
            ));
        }
        Ok(())
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(sample_seed(self.seed, index))
    }

    fn draw_events(&self, rng: &mut ChaCha8Rng) -> Vec<Event> {
        let n = rng.gen_range(self.events.0..=self.events.1);
        let (h, w) = (self.height as f64, self.width as f64);
        let s = wavelet_support(self.wavelet_width) as f64;
        (0..n)
            .map(|_| {
                let kind = self.kinds[rng.gen_range(0..self.kinds.len())];
                let amplitude = if self.amplitude.0 < self.amplitude.1 {
                    rng.gen_range(self.amplitude.0..=self.amplitude.1)
                } else {
                    self.amplitude.0
                };
                match kind {
                    EventKind::Linear => Event {
                        kind,
                        t0: rng.gen_range(s..h - s),
                        x0: w / 2.0,
                        dip: rng.gen_range(-0.5..0.5),
                        amplitude,
                    },
                    EventKind::Hyperbolic => Event {
                        kind,
                        t0: rng.gen_range(s..(h / 2.0).max(s + 1.0)),
                        x0: rng.gen_range(0.0..w),
                        dip: rng.gen_range(1.0..3.0),
                        amplitude,
                    },
                }
            })
            .collect()
    }

    /// Number of events drawn for sample `index`.
    pub fn event_count(&self, index: u64) -> usize {
        self.draw_events(&mut self.rng(index)).len()
    }

    /// Draws one full pair.
    pub fn sample(&self, index: u64) -> Result<SamplePair> {
        self.validate()?;
        let mut rng = self.rng(index);
        let events = self.draw_events(&mut rng);
        let mut y = render_events(self.height, self.width, self.wavelet_width, &events);
        let peak = y.max_abs();
        if peak > AMPLITUDE_BOUND {
            y = y.scale(AMPLITUDE_BOUND / peak);
        }
        let delay = rng.gen_range(self.delay.0..=self.delay.1);
        let ghost = GhostParams {
            delay,
            coefficient: self.ghost_coefficient,
        };
        let x = apply_ghost(&y, delay, self.ghost_coefficient)?;
        if self.noise > 0.0 {
            for v in y.data_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += self.noise * n;
            }
        }
        Ok(SamplePair {
            x,
            y,
            ghost: Some(ghost),
        })
    }
}

/// Per-sample seed, independent of generation order.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sums the Ricker responses of `events` on an `h x w` grid.
pub fn render_events(h: usize, w: usize, width: f64, events: &[Event]) -> Image {
    let mut img = Image::zeros(&[1, h, w]);
    let support = wavelet_support(width) as f64;
    let data = img.data_mut();
    for ev in events {
        for c in 0..w {
            let t = ev.arrival(c as f64);
            let lo = (t - support).ceil().max(0.0) as usize;
            let hi = (t + support).floor().min(h as f64 - 1.0);
            if hi < 0.0 {
                continue;
            }
            for r in lo..=hi as usize {
                data[r * w + c] += ev.amplitude * ricker(r as f64 - t, width);
            }
        }
    }
    img
}

/// Clean primary image for sample `index`.
pub fn gen_primary(spec: &EventSpec, index: u64) -> Result<Image> {
    let mut clean = spec.clone();
    clean.noise = 0.0;
    Ok(clean.sample(index)?.y)
}

/// Shifts every channel down by `delay` rows with zero fill.
pub fn shift_rows(img: &Image, delay: usize) -> Result<Image> {
    let (c, h, w) = img.chw()?;
    if delay >= h {
        return Err(Error::invalid("ghost", format!("delay {delay} >= height {h}")));
    }
    let mut out = Image::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = &img.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
        dst[delay * w..].copy_from_slice(&src[..(h - delay) * w]);
    }
    Ok(out)
}

/// `X = Y + rho * shift_tau(Y)`.
pub fn apply_ghost(primary: &Image, delay: usize, coefficient: f64) -> Result<Image> {
    if delay == 0 {
        return Err(Error::invalid("ghost", "delay must be at least 1"));
    }
    let s = shift_rows(primary, delay)?;
    primary.zip_map(&s, |y, g| y + coefficient * g)
}

/// One input/output realization.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub x: Image,
    pub y: Image,
    /// Known for generated pairs; estimated for loaded ones.
    pub ghost: Option<GhostParams>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    pub spec: Option<EventSpec>,
}

impl Dataset {
    pub fn new(pairs: Vec<SamplePair>, spec: Option<EventSpec>) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::invalid("dataset", "no pairs"));
        };
        let shape = first.x.shape().to_vec();
        if first.x.chw().is_err() {
            return Err(Error::invalid("dataset", format!("pair shape {shape:?}")));
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.x.shape() != shape.as_slice() || p.y.shape() != shape.as_slice() {
                return Err(Error::invalid(
                    "dataset",
                    format!(
                        "pair {i} has shapes {:?}/{:?}, expected {:?}",
                        p.x.shape(),
                        p.y.shape(),
                        shape
                    ),
                ));
            }
        }
        Ok(Dataset { pairs, spec })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(channels, height, width)` shared by all pairs.
    pub fn extents(&self) -> (usize, usize, usize) {
        self.pairs[0].x.chw().expect("validated on construction")
    }

    /// Subset by index list.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            idx.iter().map(|&i| self.pairs[i].clone()).collect(),
            self.spec.clone(),
        )
    }
}

/// Generates `n` pairs, samples `0..n` of `spec`.
pub fn make_dataset(spec: &EventSpec, n: usize) -> Result<Dataset> {
    make_dataset_from(spec, 0, n)
}

/// Generates samples `first..first + n`; disjoint ranges give held-out sets.
pub fn make_dataset_from(spec: &EventSpec, first: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset", "n must be at least 1"));
    }
    spec.validate()?;
    let threads = par::worker_count(true);
    let pairs = par::map_indexed(n, threads, |i| spec.sample(first + i as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(pairs, Some(spec.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_counts_are_uniform() {
        let spec = EventSpec::default();
        let (lo, hi) = spec.events;
        let mut hist = vec![0usize; hi + 1];
        for i in 0..1000 {
            hist[spec.event_count(i)] += 1;
        }
        let expected = 1.0 / (hi - lo + 1) as f64;
        assert!(hist[..lo].iter().all(|&c| c == 0));
        for &c in &hist[lo..] {
            let frac = c as f64 / 1000.0;
            assert!((frac - expected).abs() <= 0.05, "{hist:?}");
        }
    }

    #[test]
    fn full_scale_generation_is_fast() {
        let spec = EventSpec {
            height: 64,
            width: 64,
            ..Default::default()
        };
        let t = std::time::Instant::now();
        let ds = make_dataset(&spec, 200).unwrap();
        assert_eq!(ds.len(), 200);
        assert!(t.elapsed().as_secs_f64() < 10.0, "{:?}", t.elapsed());
    }

    #[test]
    fn flat_event_is_column_constant_ricker() {
        let img = render_events(32, 8, 2.0, &[Event::flat(10.0, 1.0)]);
        for r in 0..32 {
            let want = ricker(r as f64 - 10.0, 2.0);
            let want = if (r as f64 - 10.0).abs() <= 8.0 { want } else { 0.0 };
            for c in 0..8 {
                assert_eq!(img.data()[r * 8 + c], want);
            }
        }
        assert_eq!(img.data()[10 * 8], 1.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = EventSpec { seed: 11, ..Default::default() };
        assert_eq!(gen_primary(&spec, 3).unwrap(), gen_primary(&spec, 3).unwrap());
        assert_ne!(gen_primary(&spec, 3).unwrap(), gen_primary(&spec, 4).unwrap());
    }

    #[test]
    fn values_bounded() {
        let spec = EventSpec { events: (6, 6), ..Default::default() };
        for i in 0..20 {
            assert!(gen_primary(&spec, i).unwrap().max_abs() <= AMPLITUDE_BOUND);
        }
    }

    #[test]
    fn impulse_ghost() {
        let mut y = Image::zeros(&[1, 32, 3]);
        y.data_mut()[10 * 3 + 1] = 1.0;
        let x = apply_ghost(&y, 5, -1.0).unwrap();
        assert_eq!(x.data()[10 * 3 + 1], 1.0);
        assert_eq!(x.data()[15 * 3 + 1], -1.0);
        assert_eq!(x.data().iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn zero_coefficient_is_identity() {
        let y = gen_primary(&EventSpec::default(), 0).unwrap();
        assert_eq!(apply_ghost(&y, 5, 0.0).unwrap(), y);
    }

    #[test]
    fn periodic_primary_cancels() {
        let tau = 6;
        let y = Image::image(40, 5, |r, c| ((r % tau) as f64 * 0.3 + c as f64).sin());
        let x = apply_ghost(&y, tau, -1.0).unwrap();
        for r in tau..40 {
            for c in 0..5 {
                assert_eq!(x.data()[r * 5 + c], 0.0);
            }
        }
    }

    #[test]
    fn ghost_rejects_bad_delay() {
        let y = Image::zeros(&[1, 8, 2]);
        assert!(apply_ghost(&y, 8, -1.0).is_err());
        assert!(apply_ghost(&y, 0, -1.0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(EventSpec::default().validate().is_ok());
        let bad = [
            EventSpec { delay: (0, 3), ..Default::default() },
            EventSpec { delay: (4, 16), ..Default::default() },
            EventSpec { ghost_coefficient: 1.5, ..Default::default() },
            EventSpec { events: (0, 2), ..Default::default() },
            EventSpec { height: 20, width: 20, delay: (1, 2), ..Default::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn ghost_estimate_recovers_delay() {
        let spec = EventSpec { seed: 5, ..Default::default() };
        for i in 0..10 {
            let p = spec.sample(i).unwrap();
            let g = GhostParams::estimate(&p.x, &p.y).unwrap();
            assert_eq!(g.delay, p.ghost.unwrap().delay);
            assert!((g.coefficient + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_pairs_define_a_function() {
        // no two pairs share an input while disagreeing on the target
        let ds = make_dataset(&EventSpec { seed: 2, height: 32, width: 16, ..Default::default() }, 30)
            .unwrap();
        for i in 0..ds.len() {
            for j in 0..i {
                if ds.pairs[i].x == ds.pairs[j].x {
                    assert_eq!(ds.pairs[i].y, ds.pairs[j].y);
                }
            }
        }
    }
}
