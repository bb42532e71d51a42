//! Training-time augmentation: resize slightly above the target, random crop,
//! horizontal flip. Image pixels resample bilinearly; scribbles and masks use
//! nearest-neighbor with the identical geometric mapping, which keeps the
//! three co-registered exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{image_dims, BinaryMask, Sample};
use crate::error::Result;
use crate::losses::{Label, SaliencyMap, ScribbleMask};
use crate::tensor::{ops, Tensor};

/// Nearest source index under half-pixel-center sampling.
fn nearest_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).round();
            src.clamp(0.0, (in_len - 1) as f64) as usize
        })
        .collect()
}

fn resize_image(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, ih, iw) = image_dims(image)?;
    let batched = Tensor::from_vec(&[1, 3, ih, iw], image.data().to_vec())?;
    let out = ops::resize_bilinear_forward(&batched, h, w)?;
    Tensor::from_vec(&[3, h, w], out.into_data())
}

fn resize_labels<T: Copy>(src: &[T], iw: usize, ih: usize, w: usize, h: usize) -> Vec<T> {
    let ys = nearest_taps(ih, h);
    let xs = nearest_taps(iw, w);
    let mut out = Vec::with_capacity(w * h);
    for y in &ys {
        for x in &xs {
            out.push(src[y * iw + x]);
        }
    }
    out
}

/// Deterministic resize of a whole sample (no randomness); evaluation path.
pub fn resize_sample(sample: &Sample, size: usize) -> Result<Sample> {
    let (_, ih, iw) = image_dims(&sample.image)?;
    if ih == size && iw == size {
        return Ok(sample.clone());
    }
    Ok(Sample {
        image: resize_image(&sample.image, size, size)?,
        scribble: ScribbleMask::new(
            size,
            size,
            resize_labels(&sample.scribble.labels, iw, ih, size, size),
        )?,
        full_mask: match &sample.full_mask {
            Some(m) => Some(BinaryMask {
                width: size,
                height: size,
                values: resize_labels(&m.values, iw, ih, size, size),
            }),
            None => None,
        },
        id: sample.id.clone(),
    })
}

fn crop<T: Copy>(src: &[T], w: usize, ox: usize, oy: usize, cw: usize, ch: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        let base = (oy + y) * w + ox;
        out.extend_from_slice(&src[base..base + cw]);
    }
    out
}

fn hflip<T: Copy>(src: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(src[y * w + (w - 1 - x)]);
        }
    }
    out
}

/// Horizontally mirror a whole sample.
pub fn hflip_sample(sample: &Sample) -> Result<Sample> {
    let (_, h, w) = image_dims(&sample.image)?;
    let plane = h * w;
    let mut img = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        img.extend(hflip(&sample.image.data()[c * plane..(c + 1) * plane], w, h));
    }
    Ok(Sample {
        image: Tensor::from_vec(&[3, h, w], img)?,
        scribble: ScribbleMask::new(w, h, hflip(&sample.scribble.labels, w, h))?,
        full_mask: sample.full_mask.as_ref().map(|m| BinaryMask {
            width: w,
            height: h,
            values: hflip(&m.values, w, h),
        }),
        id: sample.id.clone(),
    })
}

/// Resize to `train_size + ceil(train_size/10)` (rounded up to even), random
/// crop back to `train_size`, flip with probability 1/2. A crop that drops
/// every foreground scribble is re-rolled up to 10 times, then accepted.
pub fn augment(sample: &Sample, seed: u64, train_size: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enlarged = train_size + train_size.div_ceil(10);
    if enlarged % 2 == 1 {
        enlarged += 1;
    }
    let big = resize_sample(sample, enlarged)?;
    let span = enlarged - train_size;

    let mut ox = rng.random_range(0..=span);
    let mut oy = rng.random_range(0..=span);
    for _ in 0..10 {
        let keeps_fg = (0..train_size).any(|y| {
            (0..train_size).any(|x| {
                big.scribble.labels[(oy + y) * enlarged + (ox + x)] == Label::Foreground
            })
        });
        if keeps_fg {
            break;
        }
        ox = rng.random_range(0..=span);
        oy = rng.random_range(0..=span);
    }

    let plane = enlarged * enlarged;
    let mut img = Vec::with_capacity(3 * train_size * train_size);
    for c in 0..3 {
        img.extend(crop(
            &big.image.data()[c * plane..(c + 1) * plane],
            enlarged,
            ox,
            oy,
            train_size,
            train_size,
        ));
    }
    let mut cropped = Sample {
        image: Tensor::from_vec(&[3, train_size, train_size], img)?,
        scribble: ScribbleMask::new(
            train_size,
            train_size,
            crop(&big.scribble.labels, enlarged, ox, oy, train_size, train_size),
        )?,
        full_mask: big.full_mask.as_ref().map(|m| BinaryMask {
            width: train_size,
            height: train_size,
            values: crop(&m.values, enlarged, ox, oy, train_size, train_size),
        }),
        id: sample.id.clone(),
    };
    if rng.random_bool(0.5) {
        cropped = hflip_sample(&cropped)?;
    }
    Ok(cropped)
}

/// Saliency map resized back to arbitrary dimensions (bilinear).
pub fn resize_map(map: &SaliencyMap, h: usize, w: usize) -> Result<SaliencyMap> {
    let t = Tensor::from_vec(&[1, 1, map.height, map.width], map.values.clone())?;
    let out = ops::resize_bilinear_forward(&t, h, w)?;
    SaliencyMap::new(w, h, out.into_data())
}
