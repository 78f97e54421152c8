//! Dataset index: records, checksums, splits and class statistics.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.json
//! stereo/<scene_id>/<frame>_L.png, <frame>_R.png
//!                   <frame>_gtdisp.bin, <frame>_valid.png   (optional)
//! seg/<knee_id>/<frame>.png, <frame>_mask.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::io::{file_sha256, read_mask, read_rgb};
use super::{LabeledSample, StereoSample};
use crate::error::{Error, Result};
use crate::grid::{Class, DisparityMap, LabelMask};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoRecord {
    pub scene_id: String,
    pub frame_index: u32,
    pub split: Split,
    pub left: String,
    pub right: String,
    pub left_sha256: String,
    pub right_sha256: String,
    /// Evaluation-only ground truth; never read by training code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_disparity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegRecord {
    pub knee_id: String,
    pub frame_index: u32,
    pub split: Split,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

/// Fraction of a group's frames in which each foreground structure appears.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPresence {
    pub frames: usize,
    pub femur: f64,
    pub tibia: f64,
    pub meniscus: f64,
    pub acl: f64,
}

impl ClassPresence {
    pub fn fraction(&self, class: Class) -> Option<f64> {
        match class {
            Class::Background => None,
            Class::Femur => Some(self.femur),
            Class::Tibia => Some(self.tibia),
            Class::Meniscus => Some(self.meniscus),
            Class::Acl => Some(self.acl),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(default)]
    pub stereo: Vec<StereoRecord>,
    #[serde(default)]
    pub seg: Vec<SegRecord>,
    #[serde(default)]
    pub class_presence_stats: BTreeMap<String, ClassPresence>,
}

/// Per-group class presence computed from masks.
pub fn class_presence_stats<'a>(masks: impl IntoIterator<Item = (&'a str, &'a LabelMask)>) -> BTreeMap<String, ClassPresence> {
    let mut counts: BTreeMap<String, (usize, [usize; 4])> = BTreeMap::new();
    for (group, mask) in masks {
        let e = counts.entry(group.to_string()).or_default();
        e.0 += 1;
        for (k, class) in Class::FOREGROUND.iter().enumerate() {
            if mask.contains(*class) {
                e.1[k] += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(g, (n, c))| {
            let f = |k: usize| c[k] as f64 / n as f64;
            (g, ClassPresence { frames: n, femur: f(0), tibia: f(1), meniscus: f(2), acl: f(3) })
        })
        .collect()
}

impl DatasetManifest {
    pub fn empty() -> Self {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            stereo: Vec::new(),
            seg: Vec::new(),
            class_presence_stats: BTreeMap::new(),
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Data(vec![e.to_string()]))?;
        super::io::write_atomic(&root.join(MANIFEST_FILE), &json)
    }

    pub fn stereo_indices(&self, split: Split) -> Vec<usize> {
        (0..self.stereo.len()).filter(|&i| self.stereo[i].split == split).collect()
    }

    pub fn seg_indices(&self, split: Split) -> Vec<usize> {
        (0..self.seg.len()).filter(|&i| self.seg[i].split == split).collect()
    }

    /// Distinct segmentation groups in first-appearance order.
    pub fn seg_groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.seg {
            if !out.contains(&r.knee_id) {
                out.push(r.knee_id.clone());
            }
        }
        out
    }
}

/// A validated dataset on disk. Samples are decoded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Loads and validates `root/manifest.json`: every referenced file must
    /// exist, match its checksum and decode to an in-contract sample. All
    /// problems are reported together.
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_slice(&text).map_err(|e| Error::Data(vec![format!("{}: {e}", path.display())]))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Data(vec![format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            )]));
        }
        let mut problems = Vec::new();
        let check = |rel: &str, sum: &str, problems: &mut Vec<String>| -> bool {
            match file_sha256(&root.join(rel)) {
                Ok(s) if s == sum => true,
                Ok(_) => {
                    problems.push(format!("{rel}: checksum mismatch"));
                    false
                }
                Err(e) => {
                    problems.push(format!("{rel}: {e}"));
                    false
                }
            }
        };
        for r in &manifest.stereo {
            let ok_l = check(&r.left, &r.left_sha256, &mut problems);
            let ok_r = check(&r.right, &r.right_sha256, &mut problems);
            if ok_l && ok_r {
                match (read_rgb(&root.join(&r.left)), read_rgb(&root.join(&r.right))) {
                    (Ok(l), Ok(rt)) if l.shape() != rt.shape() => {
                        problems.push(format!("{}: left/right shapes differ", r.left));
                    }
                    (Err(e), _) | (_, Err(e)) => problems.push(e.to_string()),
                    _ => {}
                }
            }
        }
        let mut masks = Vec::new();
        for r in &manifest.seg {
            let ok_i = check(&r.image, &r.image_sha256, &mut problems);
            let ok_m = check(&r.mask, &r.mask_sha256, &mut problems);
            if ok_i && ok_m {
                match (read_rgb(&root.join(&r.image)), read_mask(&root.join(&r.mask))) {
                    (Ok(i), Ok(m)) => {
                        if (i.height(), i.width()) != m.shape() {
                            problems.push(format!("{}: mask shape differs from image", r.mask));
                        } else {
                            masks.push((r.knee_id.clone(), m));
                        }
                    }
                    (Err(e), _) | (_, Err(e)) => problems.push(e.to_string()),
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Data(problems));
        }
        manifest.class_presence_stats = class_presence_stats(masks.iter().map(|(g, m)| (g.as_str(), m)));
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load_stereo(&self, i: usize) -> Result<StereoSample> {
        let r = &self.manifest.stereo[i];
        Ok(StereoSample {
            left: read_rgb(&self.root.join(&r.left))?,
            right: read_rgb(&self.root.join(&r.right))?,
            scene_id: r.scene_id.clone(),
            frame_index: r.frame_index,
        })
    }

    pub fn load_labeled(&self, i: usize) -> Result<LabeledSample> {
        let r = &self.manifest.seg[i];
        Ok(LabeledSample {
            image: read_rgb(&self.root.join(&r.image))?,
            mask: read_mask(&self.root.join(&r.mask))?,
            knee_id: r.knee_id.clone(),
            frame_index: r.frame_index,
        })
    }

    /// Ground-truth disparity and validity mask of a stereo record, when
    /// the dataset carries them.
    pub fn load_ground_truth(&self, i: usize) -> Result<Option<(DisparityMap, Vec<bool>)>> {
        let r = &self.manifest.stereo[i];
        let (Some(gt), Some(valid)) = (&r.gt_disparity, &r.valid_mask) else {
            return Ok(None);
        };
        let d = super::io::read_disparity(&self.root.join(gt))?;
        let (h, w, v) = super::io::read_binary_mask(&self.root.join(valid))?;
        if (h, w) != d.shape() {
            return Err(Error::Data(vec![format!("{valid}: shape differs from {gt}")]));
        }
        Ok(Some((d, v)))
    }
}

/// Shuffled batches of `items` for one epoch; the order depends only on
/// `(seed, epoch)`. The last batch may be short.
pub fn batch_order(items: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order = items.to_vec();
    let mut r = rng::derive(seed, &[rng::tag("batch-order"), epoch]);
    order.shuffle(&mut r);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presence_fixture_with_table_counts() {
        // 1043 frames: femur in 334, ACL in 209, tibia in 52, meniscus in 94.
        let masks: Vec<LabelMask> = (0..1043)
            .map(|i| {
                let mut labels = vec![0u8; 4];
                if i < 334 {
                    labels[0] = Class::Femur as u8;
                }
                if i < 209 {
                    labels[1] = Class::Acl as u8;
                }
                if i >= 1043 - 52 {
                    labels[2] = Class::Tibia as u8;
                }
                if (400..494).contains(&i) {
                    labels[3] = Class::Meniscus as u8;
                }
                LabelMask::new(2, 2, labels).unwrap()
            })
            .collect();
        let stats = class_presence_stats(masks.iter().map(|m| ("2", m)));
        let s = &stats["2"];
        assert_eq!(s.frames, 1043);
        let pct = |f: f64| (f * 100.0).round() as u32;
        assert_eq!((pct(s.femur), pct(s.acl), pct(s.tibia), pct(s.meniscus)), (32, 20, 5, 9));
        assert_eq!(s.femur, 334.0 / 1043.0);
    }

    #[test]
    fn batch_order_is_seeded() {
        let items: Vec<usize> = (0..10).collect();
        let a = batch_order(&items, 3, 7, 0);
        assert_eq!(a, batch_order(&items, 3, 7, 0));
        assert_ne!(a, batch_order(&items, 3, 7, 1));
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, items);
    }
}
