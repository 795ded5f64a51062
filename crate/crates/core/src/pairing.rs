//! Coarse pairing of frames across two traversals by nearest GPS position.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default GPS gating distance in meters.
pub const DEFAULT_MAX_DISTANCE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub frame_id: String,
    pub position: [f64; 2],
    pub timestamp: f64,
}

/// Ordered GPS poses of one traversal.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseLog {
    traversal_id: String,
    frames: Vec<PoseFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRecord {
    traversal_id: String,
    frame_id: String,
    x_m: f64,
    y_m: f64,
    t_s: f64,
}

impl PoseLog {
    pub fn new(traversal_id: impl Into<String>, frames: Vec<PoseFrame>) -> Result<Self> {
        let traversal_id = traversal_id.into();
        if frames.is_empty() {
            return Err(invalid!("pose log {traversal_id:?} is empty"));
        }
        let mut seen = HashSet::new();
        for f in &frames {
            if !seen.insert(f.frame_id.as_str()) {
                return Err(invalid!(
                    "duplicate frame id {:?} in {traversal_id:?}",
                    f.frame_id
                ));
            }
            if !f.position.iter().all(|v| v.is_finite()) {
                return Err(invalid!("non-finite position for frame {:?}", f.frame_id));
            }
        }
        Ok(PoseLog {
            traversal_id,
            frames,
        })
    }

    pub fn traversal_id(&self) -> &str {
        &self.traversal_id
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn frame(&self, frame_id: &str) -> Option<&PoseFrame> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    pub fn position_of(&self, frame_id: &str) -> Option<[f64; 2]> {
        self.frame(frame_id).map(|f| f.position)
    }

    /// Parse `traversal_id, frame_id, x_m, y_m, t_s` rows (header line required).
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut traversal: Option<String> = None;
        let mut frames = Vec::new();
        for (line, rec) in reader.deserialize::<PoseRecord>().enumerate() {
            let rec = rec.map_err(|e| invalid!("pose log row {}: {e}", line + 1))?;
            match &traversal {
                None => traversal = Some(rec.traversal_id.clone()),
                Some(t) if *t != rec.traversal_id => {
                    return Err(invalid!(
                        "pose log mixes traversals {t:?} and {:?}",
                        rec.traversal_id
                    ))
                }
                Some(_) => {}
            }
            frames.push(PoseFrame {
                frame_id: rec.frame_id,
                position: [rec.x_m, rec.y_m],
                timestamp: rec.t_s,
            });
        }
        let traversal = traversal.ok_or_else(|| invalid!("pose log has no rows"))?;
        PoseLog::new(traversal, frames)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("traversal_id,frame_id,x_m,y_m,t_s\n");
        for f in &self.frames {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.traversal_id, f.frame_id, f.position[0], f.position[1], f.timestamp
            );
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_csv_string())
    }

    /// Cumulative path length at each frame, starting at 0.
    pub fn cumulative_arc_length(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.frames.len());
        for (k, f) in self.frames.iter().enumerate() {
            if k > 0 {
                acc += distance(self.frames[k - 1].position, f.position);
            }
            out.push(acc);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarsePair {
    pub source_frame: String,
    pub target_frame: String,
    pub gps_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarsePairManifest {
    pub source_traversal: String,
    pub target_traversal: String,
    pub max_distance: f64,
    pub pairs: Vec<CoarsePair>,
}

const MANIFEST_FORMAT: &str = "capit-pairs/1";

impl CoarsePairManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format = {MANIFEST_FORMAT}");
        let _ = writeln!(out, "source_traversal = {}", self.source_traversal);
        let _ = writeln!(out, "target_traversal = {}", self.target_traversal);
        let _ = writeln!(out, "max_distance = {}", self.max_distance);
        let _ = writeln!(out, "pair_count = {}", self.pairs.len());
        out.push('\n');
        out.push_str("source_frame,target_frame,gps_distance\n");
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{},{},{}",
                p.source_frame, p.target_frame, p.gps_distance
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = std::collections::BTreeMap::new();
        for line in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid!("pair manifest header line {line:?} is not key = value"))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| invalid!("pair manifest header lacks {k}"))
        };
        if field("format")? != MANIFEST_FORMAT {
            return Err(invalid!(
                "unsupported pair manifest format {:?}",
                field("format")?
            ));
        }
        let max_distance: f64 = field("max_distance")?
            .parse()
            .map_err(|e| invalid!("max_distance: {e}"))?;
        let count: usize = field("pair_count")?
            .parse()
            .map_err(|e| invalid!("pair_count: {e}"))?;
        match lines.next().map(str::trim) {
            Some("source_frame,target_frame,gps_distance") => {}
            other => {
                return Err(invalid!(
                    "pair manifest: unexpected column header {other:?}"
                ))
            }
        }
        let mut pairs = Vec::with_capacity(count);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [s, t, d] = cols[..] else {
                return Err(invalid!("pair manifest row {line:?} needs 3 fields"));
            };
            let gps_distance: f64 = d.parse().map_err(|e| invalid!("gps distance {d:?}: {e}"))?;
            if !(gps_distance >= 0.0 && gps_distance <= max_distance) {
                return Err(invalid!(
                    "pair {s}->{t}: distance {gps_distance} outside [0, {max_distance}]"
                ));
            }
            pairs.push(CoarsePair {
                source_frame: s.to_string(),
                target_frame: t.to_string(),
                gps_distance,
            });
        }
        if pairs.len() != count {
            return Err(invalid!(
                "pair manifest declares {count} pairs, found {}",
                pairs.len()
            ));
        }
        Ok(CoarsePairManifest {
            source_traversal: field("source_traversal")?,
            target_traversal: field("target_traversal")?,
            max_distance,
            pairs,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_text())
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Pair every source frame with its nearest target frame (earliest index on
/// ties), dropping pairs farther than `max_distance`.
pub fn pair_traversals(
    source: &PoseLog,
    target: &PoseLog,
    max_distance: f64,
) -> Result<CoarsePairManifest> {
    if source.frames.is_empty() || target.frames.is_empty() {
        return Err(invalid!("cannot pair an empty pose log"));
    }
    if !(max_distance > 0.0) {
        return Err(invalid!(
            "max_distance must be positive, got {max_distance}"
        ));
    }
    let pairs = source
        .frames
        .iter()
        .filter_map(|s| {
            let (best, d) = target
                .frames
                .iter()
                .map(|t| distance(s.position, t.position))
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |(bi, bd), (i, d)| if d < bd { (i, d) } else { (bi, bd) },
                );
            (d <= max_distance).then(|| CoarsePair {
                source_frame: s.frame_id.clone(),
                target_frame: target.frames[best].frame_id.clone(),
                gps_distance: d,
            })
        })
        .collect();
    Ok(CoarsePairManifest {
        source_traversal: source.traversal_id.clone(),
        target_traversal: target.traversal_id.clone(),
        max_distance,
        pairs,
    })
}

/// Partition pairs by the source frame's cumulative arc length: pairs at or
/// before `boundary` × total length go to the first split.
pub fn split_by_location(
    manifest: &CoarsePairManifest,
    source: &PoseLog,
    boundary: f64,
) -> Result<(CoarsePairManifest, CoarsePairManifest)> {
    if !(boundary > 0.0 && boundary < 1.0) {
        return Err(invalid!(
            "split boundary must lie in (0, 1), got {boundary}"
        ));
    }
    let arc = source.cumulative_arc_length();
    let total = *arc.last().expect("pose logs are non-empty");
    if !(total > 0.0) {
        return Err(invalid!(
            "route has zero arc length; cannot split by location"
        ));
    }
    let cut = boundary * total;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for p in &manifest.pairs {
        let k = source
            .frames
            .iter()
            .position(|f| f.frame_id == p.source_frame)
            .ok_or_else(|| {
                invalid!(
                    "pair source frame {:?} missing from pose log",
                    p.source_frame
                )
            })?;
        if arc[k] <= cut {
            first.push(p.clone());
        } else {
            second.push(p.clone());
        }
    }
    let with = |pairs| CoarsePairManifest {
        pairs,
        ..manifest.clone()
    };
    Ok((with(first), with(second)))
}
