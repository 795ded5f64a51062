//! Pixel reconstruction losses: plain L1, the window-searching L1 and its
//! foreground-masked form.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::masking::BinaryMask;

/// Half-extents of the search rectangle around each pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub k_h: usize,
    pub k_w: usize,
}

impl WindowSpec {
    pub const fn square(k: usize) -> Self {
        WindowSpec { k_h: k, k_w: k }
    }
}

/// In-bounds coordinates of `r(i, j)` in row-major order.
pub fn window_indices(
    i: usize,
    j: usize,
    spec: WindowSpec,
    (h, w): (usize, usize),
) -> Vec<(usize, usize)> {
    assert!(i < h && j < w, "({i}, {j}) outside {h}x{w}");
    let rows = i.saturating_sub(spec.k_h)..=(i + spec.k_h).min(h - 1);
    rows.flat_map(|a| {
        let cols = j.saturating_sub(spec.k_w)..=(j + spec.k_w).min(w - 1);
        cols.map(move |b| (a, b))
    })
    .collect()
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_plain(gen: &Image, target: &Image) -> Result<f64> {
    Ok(l1_plain_with_grad(gen, target)?.0)
}

pub fn l1_plain_with_grad(gen: &Image, target: &Image) -> Result<(f64, Image)> {
    gen.ensure_same_shape(target, "l1_plain")?;
    let n = gen.data().len() as f64;
    let mut grad = Image::zeros(gen.channels(), gen.height(), gen.width());
    let mut total = 0.0;
    for ((g, t), d) in gen.data().iter().zip(target.data()).zip(grad.data_mut()) {
        total += (g - t).abs();
        *d = sign(g - t) / n;
    }
    Ok((total / n, grad))
}

/// Per-pixel best match: channel-summed cost and the chosen target pixel.
#[derive(Clone, Debug)]
pub(crate) struct WindowMatch {
    pub cost: Vec<f64>,
    /// Flattened target index, `usize::MAX` when the pixel is not scored.
    pub argmin: Vec<usize>,
}

/// Sweep window offsets in row-major target order; strict `<` keeps the
/// first minimum. Queries and candidates are restricted to `mask`.
pub(crate) fn window_match(
    gen: &Image,
    target: &Image,
    spec: WindowSpec,
    mask: Option<&BinaryMask>,
) -> WindowMatch {
    let (h, w, c) = gen.shape();
    let plane = h * w;
    let mut cost = vec![f64::INFINITY; plane];
    let mut argmin = vec![usize::MAX; plane];
    let active = |p: usize| mask.is_none_or(|m| m.cells()[p]);
    let (gd, td) = (gen.data(), target.data());
    let kh = spec.k_h as isize;
    let kw = spec.k_w as isize;
    for di in -kh..=kh {
        let i_lo = (-di).max(0) as usize;
        let i_hi = (h as isize - di).min(h as isize).max(0) as usize;
        for dj in -kw..=kw {
            let j_lo = (-dj).max(0) as usize;
            let j_hi = (w as isize - dj).min(w as isize).max(0) as usize;
            for i in i_lo..i_hi {
                let ti = (i as isize + di) as usize;
                for j in j_lo..j_hi {
                    let p = i * w + j;
                    let q = ti * w + (j as isize + dj) as usize;
                    if !active(p) || !active(q) {
                        continue;
                    }
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += (gd[ch * plane + p] - td[ch * plane + q]).abs();
                    }
                    if s < cost[p] {
                        cost[p] = s;
                        argmin[p] = q;
                    }
                }
            }
        }
    }
    WindowMatch { cost, argmin }
}

fn reduce(gen: &Image, target: &Image, m: &WindowMatch) -> Result<(f64, Image)> {
    let (h, w, c) = gen.shape();
    let plane = h * w;
    let scored = m.argmin.iter().filter(|&&q| q != usize::MAX).count();
    if scored == 0 {
        return Err(Error::empty_mask("window L1"));
    }
    let norm = scored as f64;
    let mut grad = Image::zeros(c, h, w);
    let mut total = 0.0;
    let (gd, td) = (gen.data(), target.data());
    let gdst = grad.data_mut();
    for (p, &q) in m.argmin.iter().enumerate() {
        if q == usize::MAX {
            continue;
        }
        total += m.cost[p];
        for ch in 0..c {
            gdst[ch * plane + p] = sign(gd[ch * plane + p] - td[ch * plane + q]) / norm;
        }
    }
    Ok((total / norm, grad))
}

/// Misalignment-tolerating L1: each generated pixel is compared with its
/// best target pixel inside the window, mean over `h·w` pixels.
pub fn l1_misalign(gen: &Image, target: &Image, spec: WindowSpec) -> Result<f64> {
    Ok(l1_misalign_with_grad(gen, target, spec)?.0)
}

pub fn l1_misalign_with_grad(
    gen: &Image,
    target: &Image,
    spec: WindowSpec,
) -> Result<(f64, Image)> {
    gen.ensure_same_shape(target, "l1_misalign")?;
    reduce(gen, target, &window_match(gen, target, spec, None))
}

/// Per-pixel minimum costs of [`l1_misalign`], row-major.
pub fn l1_misalign_map(gen: &Image, target: &Image, spec: WindowSpec) -> Result<Vec<f64>> {
    gen.ensure_same_shape(target, "l1_misalign_map")?;
    Ok(window_match(gen, target, spec, None).cost)
}

/// Masked misalignment-tolerating L1: queries and window candidates are
/// limited to the joint background, normalized by the number of scored pixels.
pub fn l1_star(gen: &Image, target: &Image, mask: &BinaryMask, spec: WindowSpec) -> Result<f64> {
    Ok(l1_star_with_grad(gen, target, mask, spec)?.0)
}

pub fn l1_star_with_grad(
    gen: &Image,
    target: &Image,
    mask: &BinaryMask,
    spec: WindowSpec,
) -> Result<(f64, Image)> {
    gen.ensure_same_shape(target, "l1_star")?;
    if mask.shape() != (gen.height(), gen.width()) {
        return Err(invalid!(
            "l1_star: mask {:?} does not match image {}x{}",
            mask.shape(),
            gen.height(),
            gen.width()
        ));
    }
    if mask.background_count() == 0 {
        return Err(Error::empty_mask("l1_star"));
    }
    reduce(gen, target, &window_match(gen, target, spec, Some(mask)))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(rows: &[&[f64]]) -> Image {
        let h = rows.len();
        let w = rows[0].len();
        Image::from_fn(1, h, w, |_, i, j| rows[i][j])
    }

    #[test]
    fn plain_examples() {
        let a = gray(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let b = gray(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(l1_plain(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_plain(&a, &b).unwrap(), 0.5);
        let z = Image::zeros(3, 2, 2);
        assert_eq!(l1_plain(&z, &Image::filled(3, 2, 2, 0.5)).unwrap(), 0.5);
        assert!(l1_plain(&z, &Image::zeros(3, 2, 3)).is_err());
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_indices(1, 1, WindowSpec::square(1), (3, 3)).len(), 9);
        assert_eq!(
            window_indices(0, 0, WindowSpec::square(1), (3, 3)),
            vec![(0, 0), (0, 1), (1, 0), (1, 1)]
        );
        assert_eq!(
            window_indices(2, 1, WindowSpec::square(0), (3, 3)),
            vec![(2, 1)]
        );
        assert_eq!(
            window_indices(0, 2, WindowSpec { k_h: 0, k_w: 2 }, (1, 4)).len(),
            4
        );
    }

    #[test]
    fn misalign_examples() {
        let mut gen = Image::zeros(1, 4, 4);
        gen.set(0, 1, 1, 1.0);
        let mut target = Image::zeros(1, 4, 4);
        target.set(0, 2, 1, 1.0);
        assert_eq!(
            l1_misalign(&gen, &target, WindowSpec::square(1)).unwrap(),
            0.0
        );
        assert_eq!(
            l1_misalign(&gen, &target, WindowSpec::square(0)).unwrap(),
            2.0 / 16.0
        );
        let c = Image::filled(1, 4, 4, -0.3);
        for k in 0..4 {
            let v = l1_misalign(&Image::zeros(1, 4, 4), &c, WindowSpec::square(k)).unwrap();
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn shifted_target_only_costs_on_padded_row() {
        let gen = Image::from_fn(1, 5, 5, |_, i, j| ((i * 5 + j) as f64 * 0.37).sin());
        // target(i) = gen(i - 1), row 0 zero padded
        let target = Image::from_fn(
            1,
            5,
            5,
            |_, i, j| if i == 0 { 0.0 } else { gen.get(0, i - 1, j) },
        );
        let map = l1_misalign_map(&gen, &target, WindowSpec::square(1)).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(map[i * 5 + j], 0.0, "({i},{j})");
            }
        }
        assert!(map[20..].iter().any(|&v| v > 0.0));
    }

    #[test]
    fn star_examples() {
        let gen = Image::from_fn(3, 4, 4, |c, i, j| {
            ((c * 16 + i * 4 + j) as f64 * 0.77).cos()
        });
        let target = Image::from_fn(3, 4, 4, |c, i, j| {
            ((c * 16 + i * 4 + j) as f64 * 0.31).sin()
        });
        let all = BinaryMask::all_background(4, 4);
        for k in 0..3 {
            let spec = WindowSpec::square(k);
            assert_eq!(
                l1_star(&gen, &target, &all, spec).unwrap(),
                l1_misalign(&gen, &target, spec).unwrap()
            );
        }
        let single = BinaryMask::from_fn(4, 4, |i, j| (i, j) == (0, 0));
        let expect: f64 = (0..3)
            .map(|c| (gen.get(c, 0, 0) - target.get(c, 0, 0)).abs())
            .sum();
        assert_eq!(
            l1_star(&gen, &target, &single, WindowSpec::square(0)).unwrap(),
            expect
        );
        assert!(matches!(
            l1_star(
                &gen,
                &target,
                &BinaryMask::all_foreground(4, 4),
                WindowSpec::square(1)
            ),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn window_ties_resolve_to_first_in_row_major_order() {
        let gen = Image::zeros(1, 3, 3);
        let target = Image::filled(1, 3, 3, 0.5);
        let m = window_match(&gen, &target, WindowSpec::square(1), None);
        assert_eq!(m.argmin[4], 0);
        assert_eq!(m.argmin[8], 4);
    }
}
