//! Foreground masks from instance proposals and the joint background set
//! used by every paired loss.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::io;

/// Default confidence threshold for accepting a proposal.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn default_fg_classes() -> BTreeSet<String> {
    ["car", "pedestrian", "cyclist", "truck", "bus"]
        .into_iter()
        .map(String::from)
        .collect()
}

/// Row-major `h × w` grid; `true` marks a background pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    background: Vec<bool>,
}

impl BinaryMask {
    pub fn all_background(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            background: vec![true; height * width],
        }
    }

    pub fn all_foreground(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            background: vec![false; height * width],
        }
    }

    pub fn from_background(height: usize, width: usize, background: Vec<bool>) -> Result<Self> {
        if background.len() != height * width {
            return Err(invalid!(
                "mask buffer has {} cells, expected {height}x{width}",
                background.len()
            ));
        }
        Ok(BinaryMask {
            height,
            width,
            background,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut is_background: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut background = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                background.push(is_background(i, j));
            }
        }
        BinaryMask {
            height,
            width,
            background,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn is_background(&self, i: usize, j: usize) -> bool {
        self.background[i * self.width + j]
    }

    pub fn set_background(&mut self, i: usize, j: usize, bg: bool) {
        self.background[i * self.width + j] = bg;
    }

    pub fn cells(&self) -> &[bool] {
        &self.background
    }

    /// card(M): number of background cells.
    pub fn background_count(&self) -> usize {
        self.background.iter().filter(|&&b| b).count()
    }

    /// Flattened `i * w + j` indices of background cells, ascending.
    pub fn background_positions(&self) -> Vec<usize> {
        self.background
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
            .collect()
    }

    /// Single-channel PNG: 0 = foreground, 255 = background.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .background
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect();
        io::write_png_bytes(path, self.width, self.height, 1, &bytes)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let (w, h, c, bytes) = io::read_png_bytes(path)?;
        if c != 1 {
            return Err(invalid!(
                "mask {} has {c} channels, expected 1",
                path.display()
            ));
        }
        Ok(BinaryMask {
            height: h,
            width: w,
            background: bytes.iter().map(|&b| b >= 128).collect(),
        })
    }
}

/// One instance proposal; `bitmap` is `true` where the instance covers a pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub bitmap: Vec<bool>,
    pub confidence: f64,
    pub class_label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceProposals {
    height: usize,
    width: usize,
    regions: Vec<Region>,
}

const PROPOSALS_FORMAT: &str = "capit-proposals/1";

impl InstanceProposals {
    pub fn new(height: usize, width: usize, regions: Vec<Region>) -> Result<Self> {
        for (k, r) in regions.iter().enumerate() {
            if r.bitmap.len() != height * width {
                return Err(invalid!(
                    "region {k} bitmap has {} cells, expected {height}x{width}",
                    r.bitmap.len()
                ));
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(invalid!(
                    "region {k} confidence {} outside [0, 1]",
                    r.confidence
                ));
            }
        }
        Ok(InstanceProposals {
            height,
            width,
            regions,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        InstanceProposals {
            height,
            width,
            regions: Vec::new(),
        }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Write `<stem>.txt` plus one `<stem>_r<k>.png` bitmap per region into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "format = {PROPOSALS_FORMAT}");
        let _ = writeln!(text, "height = {}", self.height);
        let _ = writeln!(text, "width = {}", self.width);
        text.push('\n');
        text.push_str("region_file,confidence,class_label\n");
        for (k, r) in self.regions.iter().enumerate() {
            let file = format!("{stem}_r{k}.png");
            let bytes: Vec<u8> = r.bitmap.iter().map(|&b| if b { 255 } else { 0 }).collect();
            io::write_png_bytes(&dir.join(&file), self.width, self.height, 1, &bytes)?;
            let _ = writeln!(text, "{file},{},{}", r.confidence, r.class_label);
        }
        io::write_text(&dir.join(format!("{stem}.txt")), &text)
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.txt"));
        let text = io::read_text(&path)?;
        let mut lines = text.lines();
        let mut height = None;
        let mut width = None;
        let mut format = None;
        for line in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid!("{}: bad header line {line:?}", path.display()))?;
            let v = v.trim();
            match k.trim() {
                "format" => format = Some(v.to_string()),
                "height" => height = v.parse::<usize>().ok(),
                "width" => width = v.parse::<usize>().ok(),
                other => return Err(invalid!("{}: unknown header key {other:?}", path.display())),
            }
        }
        if format.as_deref() != Some(PROPOSALS_FORMAT) {
            return Err(invalid!(
                "{}: unsupported format {format:?}",
                path.display()
            ));
        }
        let (height, width) = height
            .zip(width)
            .ok_or_else(|| invalid!("{}: missing height/width", path.display()))?;
        if lines.next().map(str::trim) != Some("region_file,confidence,class_label") {
            return Err(invalid!("{}: missing column header", path.display()));
        }
        let mut regions = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [file, conf, class] = cols[..] else {
                return Err(invalid!("{}: row {line:?} needs 3 fields", path.display()));
            };
            let confidence: f64 = conf
                .parse()
                .map_err(|e| invalid!("{}: confidence {conf:?}: {e}", path.display()))?;
            let (w, h, c, bytes) = io::read_png_bytes(&dir.join(file))?;
            if (w, h, c) != (width, height, 1) {
                return Err(invalid!("region {file} has shape {h}x{w}x{c}"));
            }
            regions.push(Region {
                bitmap: bytes.iter().map(|&b| b >= 128).collect(),
                confidence,
                class_label: class.to_string(),
            });
        }
        InstanceProposals::new(height, width, regions)
    }
}

/// Background = not covered by any accepted foreground-class region.
pub fn build_foreground_mask(
    proposals: &InstanceProposals,
    threshold: f64,
    fg_classes: &BTreeSet<String>,
) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid!("threshold {threshold} outside [0, 1]"));
    }
    let (h, w) = proposals.shape();
    let mut mask = BinaryMask::all_background(h, w);
    for r in &proposals.regions {
        if r.bitmap.len() != h * w {
            return Err(invalid!("region bitmap shape mismatch"));
        }
        if r.confidence >= threshold && fg_classes.contains(&r.class_label) {
            for (bg, &covered) in mask.background.iter_mut().zip(&r.bitmap) {
                if covered {
                    *bg = false;
                }
            }
        }
    }
    Ok(mask)
}

/// M(x, y): background in both masks.
pub fn joint_background(mask_x: &BinaryMask, mask_y: &BinaryMask) -> Result<BinaryMask> {
    if mask_x.shape() != mask_y.shape() {
        return Err(invalid!(
            "mask shape mismatch {:?} vs {:?}",
            mask_x.shape(),
            mask_y.shape()
        ));
    }
    Ok(BinaryMask {
        height: mask_x.height,
        width: mask_x.width,
        background: mask_x
            .background
            .iter()
            .zip(&mask_y.background)
            .map(|(&a, &b)| a && b)
            .collect(),
    })
}

/// Block-reduce by `factor`; an output cell is background iff at least
/// `keep_fraction` of its block is background.
pub fn downsample_mask(mask: &BinaryMask, factor: usize, keep_fraction: f64) -> Result<BinaryMask> {
    if factor == 0 {
        return Err(invalid!("downsample factor must be positive"));
    }
    if !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(invalid!(
            "mask {}x{} is not divisible by factor {factor}",
            mask.height,
            mask.width
        ));
    }
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(invalid!("keep_fraction {keep_fraction} outside [0, 1]"));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let block = (factor * factor) as f64;
    Ok(BinaryMask::from_fn(h, w, |i, j| {
        let mut count = 0usize;
        for a in 0..factor {
            for b in 0..factor {
                count += mask.is_background(i * factor + a, j * factor + b) as usize;
            }
        }
        count as f64 >= keep_fraction * block
    }))
}

impl Error {
    pub(crate) fn empty_mask(what: &str) -> Self {
        Error::Degenerate(format!("{what}: mask has no background pixels"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn region(h: usize, w: usize, cells: &[(usize, usize)], conf: f64, class: &str) -> Region {
        let mut bitmap = vec![false; h * w];
        for &(i, j) in cells {
            bitmap[i * w + j] = true;
        }
        Region {
            bitmap,
            confidence: conf,
            class_label: class.into(),
        }
    }

    #[test]
    fn threshold_selects_confident_regions() {
        let props = InstanceProposals::new(
            2,
            2,
            vec![
                region(2, 2, &[(0, 0)], 0.6, "car"),
                region(2, 2, &[(1, 1)], 0.4, "car"),
            ],
        )
        .unwrap();
        let m = build_foreground_mask(&props, 0.5, &default_fg_classes()).unwrap();
        assert!(!m.is_background(0, 0));
        assert!(m.is_background(1, 1));
        assert_eq!(m.background_count(), 3);
    }

    #[test]
    fn empty_proposals_and_saturation() {
        let fg = default_fg_classes();
        let m = build_foreground_mask(&InstanceProposals::empty(3, 3), 0.5, &fg).unwrap();
        assert_eq!(m, BinaryMask::all_background(3, 3));
        let full: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        let props =
            InstanceProposals::new(3, 3, vec![region(3, 3, &full, 0.0, "pedestrian")]).unwrap();
        let m = build_foreground_mask(&props, 0.0, &fg).unwrap();
        assert_eq!(m, BinaryMask::all_foreground(3, 3));
    }

    #[test]
    fn non_foreground_classes_are_ignored() {
        let props =
            InstanceProposals::new(2, 2, vec![region(2, 2, &[(0, 1)], 0.99, "pole")]).unwrap();
        let m = build_foreground_mask(&props, 0.5, &default_fg_classes()).unwrap();
        assert_eq!(m.background_count(), 4);
    }

    #[test]
    fn proposal_validation() {
        assert!(InstanceProposals::new(2, 2, vec![region(2, 3, &[], 0.5, "car")]).is_err());
        assert!(InstanceProposals::new(2, 2, vec![region(2, 2, &[], 1.5, "car")]).is_err());
    }

    #[test]
    fn joint_background_examples() {
        let x = BinaryMask::from_fn(2, 2, |i, j| (i, j) != (0, 0));
        let y = BinaryMask::from_fn(2, 2, |i, j| (i, j) != (1, 1));
        let m = joint_background(&x, &y).unwrap();
        assert_eq!(m.background_positions(), vec![1, 2]);
        let bg = BinaryMask::all_background(2, 2);
        assert_eq!(joint_background(&bg, &bg).unwrap(), bg);
        let fg = BinaryMask::all_foreground(2, 2);
        assert_eq!(joint_background(&fg, &y).unwrap(), fg);
        assert!(joint_background(&bg, &BinaryMask::all_background(2, 3)).is_err());
    }

    #[test]
    fn downsample_examples() {
        let bg = BinaryMask::all_background(4, 4);
        assert_eq!(
            downsample_mask(&bg, 2, 1.0).unwrap(),
            BinaryMask::all_background(2, 2)
        );
        let mut one = bg.clone();
        one.set_background(0, 1, false);
        let strict = downsample_mask(&one, 2, 1.0).unwrap();
        assert!(!strict.is_background(0, 0));
        assert_eq!(strict.background_count(), 3);
        let lenient = downsample_mask(&one, 2, 0.5).unwrap();
        assert!(lenient.is_background(0, 0));
        assert!(downsample_mask(&BinaryMask::all_background(5, 4), 2, 1.0).is_err());
    }

    #[test]
    fn png_and_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(3, 5, |i, j| (i + j) % 3 != 0);
        let p = dir.path().join("m.png");
        m.write_png(&p).unwrap();
        assert_eq!(BinaryMask::read_png(&p).unwrap(), m);
        let props = InstanceProposals::new(
            3,
            5,
            vec![
                region(3, 5, &[(0, 0), (2, 4)], 0.25, "car"),
                region(3, 5, &[(1, 1)], 0.875, "bus"),
            ],
        )
        .unwrap();
        props.write(dir.path(), "f0").unwrap();
        assert_eq!(InstanceProposals::read(dir.path(), "f0").unwrap(), props);
    }

    fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |b| BinaryMask::from_background(h, w, b).unwrap())
    }

    proptest! {
        #[test]
        fn joint_background_algebra(a in mask(4, 5), b in mask(4, 5)) {
            let ab = joint_background(&a, &b).unwrap();
            prop_assert_eq!(&ab, &joint_background(&b, &a).unwrap());
            prop_assert_eq!(&joint_background(&a, &a).unwrap(), &a);
            prop_assert_eq!(&joint_background(&a, &BinaryMask::all_background(4, 5)).unwrap(), &a);
            prop_assert_eq!(ab.background_count(), ab.cells().iter().filter(|&&c| c).count());
        }

        #[test]
        fn raising_threshold_never_grows_foreground(
            confs in prop::collection::vec(0.0..=1.0f64, 1..6),
            cells in prop::collection::vec(prop::collection::vec(any::<bool>(), 16), 6),
            t1 in 0.0..=1.0f64, dt in 0.0..=1.0f64,
        ) {
            let regions = confs.iter().zip(&cells).map(|(&c, bits)| Region {
                bitmap: bits.clone(), confidence: c, class_label: "car".into()
            }).collect();
            let props = InstanceProposals::new(4, 4, regions).unwrap();
            let fg = default_fg_classes();
            let lo = build_foreground_mask(&props, t1, &fg).unwrap();
            let hi = build_foreground_mask(&props, (t1 + dt).min(1.0), &fg).unwrap();
            for (l, h) in lo.cells().iter().zip(hi.cells()) {
                // foreground at the higher threshold implies foreground at the lower one
                if !*h { prop_assert!(!*l); }
            }
        }
    }
}
