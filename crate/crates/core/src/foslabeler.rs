//! Filter-out-safe supervision: per-modality droppability by zero-fill
//! ablation against the server fusion model, and the label-augmentation
//! table that turns (FoI, droppability) into per-modality send labels.
//!
//! Droppability of modality `m` means the server's thresholded decision is
//! unchanged when `m` alone is zero-filled. The published decision table is
//! keyed by "RGB FoS" and "Depth FoS" columns; its rows are consistent with
//! droppability only when the "RGB FoS" column is read as "RGB suffices
//! alone", i.e. `droppable[depth]`, and "Depth FoS" as `droppable[rgb]`.
//! [`FosMode::TableVerbatim`] uses that mapping.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Frame};
use crate::error::{ensure, Error, Result};
use crate::fusionmodel::FusionModel;
use crate::par::{self, Exec};

/// One label-table row: `((foi, rgb_fos, depth_fos), (rgb_label, depth_label))`.
pub type LabelRow = ((bool, bool, bool), (bool, bool));

/// The label table, as printed.
pub const LABEL_TABLE: [LabelRow; 8] = [
    ((false, false, false), (false, false)),
    ((false, false, true), (false, false)),
    ((false, true, false), (false, false)),
    ((false, true, true), (false, false)),
    ((true, false, false), (true, true)),
    ((true, false, true), (false, true)),
    ((true, true, false), (true, false)),
    ((true, true, true), (false, true)),
];

const RGB: usize = 0;
const DEPTH: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FosMode {
    /// Literal table lookup; two modalities only.
    TableVerbatim,
    /// Send every non-droppable modality; if all are droppable, send the
    /// highest-priority one. Works for any modality count.
    #[default]
    DroppabilityRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FosPolicy {
    pub mode: FosMode,
    /// Modality ids, most preferred first, used when every modality is
    /// individually droppable.
    pub keep_priority: Vec<usize>,
}

impl FosPolicy {
    /// Depth first, then rgb, then the remaining modalities in id order.
    pub fn default_for(n_modalities: usize) -> Self {
        let mut keep_priority: Vec<usize> = (0..n_modalities).collect();
        if n_modalities >= 2 {
            keep_priority.swap(RGB, DEPTH);
        }
        Self {
            mode: FosMode::DroppabilityRule,
            keep_priority,
        }
    }

    pub fn validate(&self, n_modalities: usize) -> Result<()> {
        let mut seen: Vec<usize> = self.keep_priority.clone();
        seen.sort_unstable();
        ensure!(
            seen == (0..n_modalities).collect::<Vec<_>>(),
            Config,
            "keep_priority {:?} is not a permutation of 0..{n_modalities}",
            self.keep_priority
        );
        if self.mode == FosMode::TableVerbatim {
            ensure!(
                n_modalities == 2,
                Config,
                "table_verbatim mode needs exactly 2 modalities, got {n_modalities}"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FosRecord {
    pub frame_id: u64,
    pub foi: bool,
    pub droppable: Vec<bool>,
    pub send_label: Vec<bool>,
}

/// Zero-fill ablation: `droppable[m]` is true when dropping only `m` leaves
/// the server decision unchanged.
pub fn derive_droppable(server: &FusionModel, frame: &Frame) -> Result<Vec<bool>> {
    let n = server.n_modalities();
    let mut mask = vec![true; n];
    let full = server.predict_frame(frame, &mask)?;
    (0..n)
        .map(|m| {
            mask[m] = false;
            let ablated = server.predict_frame(frame, &mask);
            mask[m] = true;
            Ok(ablated? == full)
        })
        .collect()
}

pub fn augment_labels(foi: bool, droppable: &[bool], policy: &FosPolicy) -> Result<Vec<bool>> {
    policy.validate(droppable.len())?;
    match policy.mode {
        FosMode::TableVerbatim => {
            let key = (foi, droppable[DEPTH], droppable[RGB]);
            let (_, (rgb, depth)) = LABEL_TABLE
                .iter()
                .find(|(k, _)| *k == key)
                .expect("table covers all 8 inputs");
            Ok(vec![*rgb, *depth])
        }
        FosMode::DroppabilityRule => {
            if !foi {
                return Ok(vec![false; droppable.len()]);
            }
            let mut send: Vec<bool> = droppable.iter().map(|&d| !d).collect();
            if !send.iter().any(|&s| s) {
                send[policy.keep_priority[0]] = true;
            }
            Ok(send)
        }
    }
}

pub fn build_fos_dataset(server: &FusionModel, dataset: &Dataset, policy: &FosPolicy) -> Result<Vec<FosRecord>> {
    build_fos_dataset_with(Exec::default(), server, dataset, policy)
}

/// One record per training frame, in frame order.
pub fn build_fos_dataset_with(
    exec: Exec,
    server: &FusionModel,
    dataset: &Dataset,
    policy: &FosPolicy,
) -> Result<Vec<FosRecord>> {
    policy.validate(server.n_modalities())?;
    par::try_map(exec, &dataset.train, |frame| {
        let droppable = derive_droppable(server, frame)?;
        let send_label = augment_labels(frame.foi, &droppable, policy)?;
        Ok(FosRecord {
            frame_id: frame.frame_id,
            foi: frame.foi,
            droppable,
            send_label,
        })
    })
}

/// One JSON object per line: `frame_id`, `foi`, `droppable`, `send_label`.
pub fn write_fos_records(records: &[FosRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::parse(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_fos_records(path: &Path) -> Result<Vec<FosRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: FosRecord = serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        if !ids.insert(r.frame_id) {
            return Err(Error::Data(format!("{}: duplicate frame_id {}", path.display(), r.frame_id)));
        }
        out.push(r);
    }
    Ok(out)
}
