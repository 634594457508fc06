//! Click simulation: centroid, rectangular dilation, concentric bands and
//! seeded per-band sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Click};

pub const NUM_BANDS: usize = 5;
pub const CLICKS_PER_BAND: usize = 5;

/// Rounded first moment of the mask, snapped to the nearest mask pixel
/// (squared Euclidean distance, then smallest `(row, col)`) when the
/// rounded point falls outside it.
pub fn centroid(m: &BinaryMask) -> Result<Click> {
    let (mut n, mut sr, mut sc) = (0u64, 0u64, 0u64);
    for (r, c) in m.pixels() {
        n += 1;
        sr += r as u64;
        sc += c as u64;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let row = (sr as f64 / n as f64).round() as usize;
    let col = (sc as f64 / n as f64).round() as usize;
    if m.get(row, col) {
        return Ok(Click::new(col, row));
    }
    let d2 = |(r, c): (usize, usize)| {
        let dr = r as i64 - row as i64;
        let dc = c as i64 - col as i64;
        dr * dr + dc * dc
    };
    // `pixels` is row-major, so the first minimum wins ties.
    let (r, c) = m
        .pixels()
        .min_by_key(|&p| d2(p))
        .expect("mask is non-empty");
    Ok(Click::new(c, r))
}

fn dilate_rows(bits: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    let mut prefix = vec![0u32; w + 1];
    for r in 0..h {
        let row = &bits[r * w..(r + 1) * w];
        for c in 0..w {
            prefix[c + 1] = prefix[c] + row[c] as u32;
        }
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius + 1).min(w);
            out[r * w + c] = prefix[hi] > prefix[lo];
        }
    }
    out
}

fn transpose(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = bits[r * w + c];
        }
    }
    out
}

/// Binary dilation with a filled `kernel_h × kernel_w` rectangle anchored at
/// its center. Both dimensions must be odd.
pub fn dilate(m: &BinaryMask, kernel_h: usize, kernel_w: usize) -> Result<BinaryMask> {
    if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "dilation kernel {kernel_h}x{kernel_w} must have odd dimensions"
        )));
    }
    let (h, w) = (m.height(), m.width());
    let horiz = dilate_rows(m.bits(), h, w, kernel_w / 2);
    let vert = dilate_rows(&transpose(&horiz, h, w), w, h, kernel_h / 2);
    BinaryMask::from_bits(h, w, transpose(&vert, w, h))
}

/// Smallest odd integer not below `v`.
pub fn odd_ceil(v: f64) -> usize {
    let k = (v.ceil() as usize).max(1);
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Five disjoint bands covering an instance, innermost first.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSet {
    pub bands: Vec<BinaryMask>,
    pub centroid: Click,
    /// `(kernel_h, kernel_w)` of the dilation step.
    pub kernel: (usize, usize),
}

impl BandSet {
    /// Union of all bands, which is the instance mask.
    pub fn instance(&self) -> BinaryMask {
        let mut all = self.bands[0].clone();
        for b in &self.bands[1..] {
            all = all.or(b).expect("bands share dimensions");
        }
        all
    }
}

/// Grows the centroid by repeated dilation with a kernel of one fifth of the
/// instance's bounding box. Band `k < 5` is the ring added by the `k`-th
/// dilation, band 5 the rest of the instance.
pub fn make_bands(instance: &BinaryMask) -> Result<BandSet> {
    let bbox = instance.bbox().ok_or(Error::EmptyMask)?;
    let seed = centroid(instance)?;
    let kernel = (
        odd_ceil(bbox.height() as f64 / NUM_BANDS as f64),
        odd_ceil(bbox.width() as f64 / NUM_BANDS as f64),
    );
    let mut prev = BinaryMask::new(instance.height(), instance.width());
    prev.set(seed.y, seed.x, true);
    let mut covered = BinaryMask::new(instance.height(), instance.width());
    let mut bands = Vec::with_capacity(NUM_BANDS);
    for _ in 0..NUM_BANDS - 1 {
        let next = dilate(&prev, kernel.0, kernel.1)?;
        let band = next.minus(&covered)?.and(instance)?;
        covered = next.clone();
        bands.push(band);
        prev = next;
    }
    bands.push(instance.minus(&covered)?);
    Ok(BandSet {
        bands,
        centroid: seed,
        kernel,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedClick {
    /// 1-based band index.
    pub band: usize,
    pub x: usize,
    pub y: usize,
}

impl SimulatedClick {
    pub fn click(&self) -> Click {
        Click::new(self.x, self.y)
    }
}

fn draw(pixels: &[(usize, usize)], n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if pixels.len() >= n {
        pixels.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n).map(|_| pixels[rng.gen_range(0..pixels.len())]).collect()
    }
}

/// `per_band` clicks from each band: without replacement when the band is
/// large enough, with replacement otherwise, and from the whole instance
/// when the band is empty. `stream` separates instances sharing one seed.
pub fn sample_clicks(
    bands: &BandSet,
    per_band: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<SimulatedClick>> {
    let whole: Vec<(usize, usize)> = bands.instance().pixels().collect();
    if whole.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(per_band * bands.bands.len());
    for (k, band) in bands.bands.iter().enumerate() {
        let pixels: Vec<(usize, usize)> = band.pixels().collect();
        let pool = if pixels.is_empty() { &whole } else { &pixels };
        out.extend(draw(pool, per_band, &mut rng).into_iter().map(|(y, x)| SimulatedClick {
            band: k + 1,
            x,
            y,
        }));
    }
    Ok(out)
}
