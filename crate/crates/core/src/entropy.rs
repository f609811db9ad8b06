//! Local color-entropy maps.
//!
//! Colors are quantized by right-shifting each channel by `tau` bits and
//! packing the three channels into one code. Each distinct code becomes a
//! one-hot channel; a 7x7 all-ones depthwise convolution (zero padding,
//! stride 1) counts every color around each pixel, a second 7x7 convolution
//! over an all-ones plane gives the in-bounds window area, and the map is the
//! Shannon entropy (nats) of the per-window color histogram.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4, Axis};

use crate::synthdata::{PolarizedGroup, ANGLE_COUNT};
use crate::{Error, Result};

pub const WINDOW: usize = 7;
const HALF: usize = WINDOW / 2;
pub const DEFAULT_TAU: u32 = 5;

/// How the three shifted channels are packed into one code.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CodeMode {
    /// `R' * 2^(2(8-tau)) + G' * 2^(8-tau) + B'`: one code per color.
    #[default]
    Safe,
    /// `256 * R' + (256 >> tau) * G' + B'`, which can merge distinct colors
    /// for `tau < 4`.
    Paper,
}

/// Which color channels enter the entropy sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EntropySum {
    #[default]
    AllColors,
    /// Only the first seven channels in ascending code order.
    FirstSeven,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EntropyOptions {
    pub mode: CodeMode,
    pub sum: EntropySum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub values: Array2<f64>,
    pub tau: u32,
}

fn check_tau(tau: u32) -> Result<()> {
    if (1..=7).contains(&tau) {
        Ok(())
    } else {
        Err(Error::invalid("tau", format!("must lie in [1, 7], got {tau}")))
    }
}

fn check_image(image: &Array3<u8>) -> Result<()> {
    if image.shape()[2] != 3 || image.shape()[0] == 0 || image.shape()[1] == 0 {
        return Err(Error::Shape(format!("expected a non-empty HxWx3 image, got {:?}", image.shape())));
    }
    Ok(())
}

fn pack(r: u32, g: u32, b: u32, tau: u32, mode: CodeMode) -> u32 {
    match mode {
        CodeMode::Safe => {
            let bits = 8 - tau;
            (r << (2 * bits)) | (g << bits) | b
        }
        CodeMode::Paper => 256 * r + (256 >> tau) * g + b,
    }
}

/// Quantized color code per pixel and the number of distinct codes.
pub fn quantize_colors(image: &Array3<u8>, tau: u32, mode: CodeMode) -> Result<(Array2<u32>, usize)> {
    check_tau(tau)?;
    check_image(image)?;
    let (h, w, _) = image.dim();
    let codes = Array2::from_shape_fn((h, w), |(y, x)| {
        let q = |ch: usize| (image[[y, x, ch]] as u32) >> tau;
        pack(q(0), q(1), q(2), tau, mode)
    });
    let mut unique: Vec<u32> = codes.iter().copied().collect();
    unique.sort_unstable();
    unique.dedup();
    Ok((codes, unique.len()))
}

/// Sum over the centered 7x7 window with zero padding.
fn box_sum(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(HALF);
            let hi = (x + HALF).min(w - 1);
            rows[[y, x]] = (lo..=hi).map(|i| plane[[y, i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let lo = y.saturating_sub(HALF);
        let hi = (y + HALF).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).map(|j| rows[[j, x]]).sum();
        }
    }
    out
}

/// Entropy map with default options (collision-free codes, sum over all colors).
pub fn entropy_map(image: &Array3<u8>, tau: u32) -> Result<EntropyMap> {
    entropy_map_with(image, tau, EntropyOptions::default())
}

pub fn entropy_map_with(image: &Array3<u8>, tau: u32, opts: EntropyOptions) -> Result<EntropyMap> {
    let (codes, _) = quantize_colors(image, tau, opts.mode)?;
    let (h, w) = codes.dim();
    let mut unique: Vec<u32> = codes.iter().copied().collect();
    unique.sort_unstable();
    unique.dedup();
    let channels = match opts.sum {
        EntropySum::AllColors => unique.len(),
        EntropySum::FirstSeven => unique.len().min(7),
    };
    let area = box_sum(&Array2::ones((h, w)));
    let mut entropy = Array2::<f64>::zeros((h, w));
    for &code in &unique[..channels] {
        let onehot = codes.mapv(|c| if c == code { 1.0 } else { 0.0 });
        let counts = box_sum(&onehot);
        ndarray::Zip::from(&mut entropy).and(&counts).and(&area).for_each(|e, &n, &a| {
            if n > 0.0 {
                let p = n / a;
                *e -= p * p.ln();
            }
        });
    }
    Ok(EntropyMap { values: entropy, tau })
}

/// Reference implementation: explicit per-pixel window histograms.
pub fn entropy_map_oracle(image: &Array3<u8>, tau: u32) -> Result<EntropyMap> {
    entropy_map_oracle_with(image, tau, EntropyOptions::default())
}

pub fn entropy_map_oracle_with(image: &Array3<u8>, tau: u32, opts: EntropyOptions) -> Result<EntropyMap> {
    check_tau(tau)?;
    check_image(image)?;
    let (h, w, _) = image.dim();
    let code_at = |y: usize, x: usize| {
        let q = |ch: usize| (image[[y, x, ch]] as u32) >> tau;
        pack(q(0), q(1), q(2), tau, opts.mode)
    };
    let allowed: Option<Vec<u32>> = match opts.sum {
        EntropySum::AllColors => None,
        EntropySum::FirstSeven => {
            let mut all: Vec<u32> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| code_at(y, x)).collect();
            all.sort_unstable();
            all.dedup();
            all.truncate(7);
            Some(all)
        }
    };
    let mut values = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
            let mut area = 0usize;
            for dy in -(HALF as isize)..=HALF as isize {
                for dx in -(HALF as isize)..=HALF as isize {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    area += 1;
                    *hist.entry(code_at(yy as usize, xx as usize)).or_default() += 1;
                }
            }
            values[[y, x]] = hist
                .iter()
                .filter(|(code, _)| allowed.as_ref().is_none_or(|a| a.contains(code)))
                .map(|(_, &n)| {
                    let p = n as f64 / area as f64;
                    -p * p.ln()
                })
                .sum();
        }
    }
    Ok(EntropyMap { values, tau })
}

/// Entropy of each of the seven views, `[7, H, W, 1]`.
pub fn group_entropy(group: &PolarizedGroup, tau: u32) -> Result<Array4<f64>> {
    check_tau(tau)?;
    let (h, w) = (group.height(), group.width());
    let mut out = Array4::<f64>::zeros((ANGLE_COUNT, h, w, 1));
    for k in 0..ANGLE_COUNT {
        let e = entropy_map(&group.view_u8(k), tau)?;
        out.index_axis_mut(Axis(0), k).index_axis_mut(Axis(2), 0).assign(&e.values);
    }
    Ok(out)
}

/// 8-bit visualization scaled so the map maximum becomes 255.
pub fn visualize(map: &Array2<f64>) -> Array2<u8> {
    let max = map.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8)
}
