//! Single-file dataset container: magic "EAGD", version, JSON header with an
//! array directory (dtype/shape/offset/checksum), then raw little-endian
//! arrays. Readable from any language; offsets are relative to the end of
//! the header so the directory supports partial reads.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    BehaviorCondition, ConditionKind, RateSequence, SpikeTrain, Split, Trial, TrialDataset,
};
use crate::error::{EagError, Result};
use crate::trainer::crc32;

const MAGIC: &[u8; 4] = b"EAGD";
const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    n: usize,
    t: usize,
    bin_width: f64,
    n_trials: usize,
    behavior_kind: String,
    #[serde(default)]
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

fn push_array(
    payload: &mut Vec<u8>,
    arrays: &mut Vec<ArrayEntry>,
    name: &str,
    dtype: &str,
    shape: Vec<usize>,
    bytes: Vec<u8>,
) {
    arrays.push(ArrayEntry {
        name: name.to_string(),
        dtype: dtype.to_string(),
        shape,
        offset: payload.len() as u64,
        byte_len: bytes.len() as u64,
        crc32: crc32(&bytes),
    });
    payload.extend_from_slice(&bytes);
}

/// Write a dataset with spikes, optional rates/behavior, and split labels.
/// `meta` is free-form (sampling latency, provenance) and is the only part
/// of the file allowed to differ between reruns of the same seed.
pub fn write_dataset(ds: &TrialDataset, meta: serde_json::Value, path: &Path) -> Result<()> {
    let n = ds.n_neurons();
    let t = ds.t_bins();
    let trials = ds.len();

    let mut payload: Vec<u8> = Vec::new();
    let mut arrays: Vec<ArrayEntry> = Vec::new();

    // spikes u16 [trials, n, t]
    let mut spikes_bytes = Vec::with_capacity(trials * n * t * 2);
    for tr in ds.trials() {
        for &c in tr.spikes.counts() {
            spikes_bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    push_array(&mut payload, &mut arrays, "spikes", "u16", vec![trials, n, t], spikes_bytes);

    // rates f32 [trials, n, t] when every trial has them
    if ds.trials().iter().all(|tr| tr.rates.is_some()) {
        let mut bytes = Vec::with_capacity(trials * n * t * 4);
        for tr in ds.trials() {
            for &r in tr.rates.as_ref().unwrap().rates() {
                bytes.extend_from_slice(&(r as f32).to_le_bytes());
            }
        }
        push_array(&mut payload, &mut arrays, "rates", "f32", vec![trials, n, t], bytes);
    }

    // behavior
    let behavior_kind = match ds.behavior_kind() {
        None => "none",
        Some(ConditionKind::Angle) => "angle",
        Some(ConditionKind::Velocity) => "velocity",
    };
    match ds.behavior_kind() {
        Some(ConditionKind::Angle) => {
            let mut bytes = Vec::with_capacity(trials * 4);
            for (i, tr) in ds.trials().iter().enumerate() {
                match &tr.behavior {
                    Some(BehaviorCondition::Angle(a)) => {
                        bytes.extend_from_slice(&(*a as f32).to_le_bytes())
                    }
                    _ => {
                        return Err(EagError::format(format!(
                            "trial {i} missing the angle behavior the dataset declares"
                        )))
                    }
                }
            }
            push_array(&mut payload, &mut arrays, "behavior", "f32", vec![trials, 1], bytes);
        }
        Some(ConditionKind::Velocity) => {
            let mut bytes = Vec::with_capacity(trials * 2 * t * 4);
            for (i, tr) in ds.trials().iter().enumerate() {
                match &tr.behavior {
                    Some(BehaviorCondition::Velocity { vx, vy }) => {
                        for &v in vx {
                            bytes.extend_from_slice(&(v as f32).to_le_bytes());
                        }
                        for &v in vy {
                            bytes.extend_from_slice(&(v as f32).to_le_bytes());
                        }
                    }
                    _ => {
                        return Err(EagError::format(format!(
                            "trial {i} missing the velocity behavior the dataset declares"
                        )))
                    }
                }
            }
            push_array(&mut payload, &mut arrays, "behavior", "f32", vec![trials, 2, t], bytes);
        }
        None => {}
    }

    // splits u8 [trials]
    let split_bytes: Vec<u8> = ds.splits().iter().map(|s| s.as_u8()).collect();
    push_array(&mut payload, &mut arrays, "splits", "u8", vec![trials], split_bytes);

    let header = Header {
        n,
        t,
        bin_width: ds.bin_width(),
        n_trials: trials,
        behavior_kind: behavior_kind.to_string(),
        meta,
        arrays,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| EagError::format(format!("dataset header encode: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

/// Read back a dataset plus its free-form meta object.
pub fn read_dataset(path: &Path) -> Result<(TrialDataset, serde_json::Value)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EagError::format("not an EAGD dataset (bad magic)"));
    }
    let mut v = [0u8; 2];
    file.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(EagError::format(format!(
            "unsupported dataset version {version} (expected {VERSION})"
        )));
    }
    let mut hlen = [0u8; 4];
    file.read_exact(&mut hlen)?;
    let hlen = u32::from_le_bytes(hlen) as usize;
    let mut header_bytes = vec![0u8; hlen];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| EagError::format(format!("dataset header decode: {e}")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let slice_of = |name: &str| -> Result<Option<(&ArrayEntry, &[u8])>> {
        match header.arrays.iter().find(|a| a.name == name) {
            None => Ok(None),
            Some(entry) => {
                let start = entry.offset as usize;
                let end = start + entry.byte_len as usize;
                if end > payload.len() {
                    return Err(EagError::format(format!(
                        "dataset truncated: array `{name}` ends at {end}, payload is {}",
                        payload.len()
                    )));
                }
                let bytes = &payload[start..end];
                if crc32(bytes) != entry.crc32 {
                    return Err(EagError::format(format!(
                        "checksum failure in dataset array `{name}`"
                    )));
                }
                Ok(Some((entry, bytes)))
            }
        }
    };

    let (n, t, trials) = (header.n, header.t, header.n_trials);
    let (spike_entry, spike_bytes) = slice_of("spikes")?
        .ok_or_else(|| EagError::format("dataset missing spikes array"))?;
    if spike_entry.shape != vec![trials, n, t] || spike_entry.dtype != "u16" {
        return Err(EagError::format("spikes array shape/dtype mismatch"));
    }
    let rates = slice_of("rates")?;
    let behavior = slice_of("behavior")?;
    let (split_entry, split_bytes) = slice_of("splits")?
        .ok_or_else(|| EagError::format("dataset missing splits array"))?;
    if split_entry.shape != vec![trials] {
        return Err(EagError::format("splits array shape mismatch"));
    }

    let mut trial_vec = Vec::with_capacity(trials);
    for i in 0..trials {
        let counts: Vec<u16> = spike_bytes[i * n * t * 2..(i + 1) * n * t * 2]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let spikes = SpikeTrain::new(n, t, header.bin_width, counts)?;
        let rates_i = match &rates {
            Some((_, bytes)) => {
                let vals: Vec<f64> = bytes[i * n * t * 4..(i + 1) * n * t * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                Some(RateSequence::new(n, t, header.bin_width, vals)?)
            }
            None => None,
        };
        let behavior_i = match (&behavior, header.behavior_kind.as_str()) {
            (Some((_, bytes)), "angle") => {
                let a = f32::from_le_bytes([
                    bytes[i * 4],
                    bytes[i * 4 + 1],
                    bytes[i * 4 + 2],
                    bytes[i * 4 + 3],
                ]) as f64;
                Some(BehaviorCondition::Angle(a))
            }
            (Some((_, bytes)), "velocity") => {
                let base = i * 2 * t * 4;
                let read = |off: usize| -> Vec<f64> {
                    bytes[base + off * t * 4..base + (off + 1) * t * 4]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect()
                };
                Some(BehaviorCondition::Velocity { vx: read(0), vy: read(1) })
            }
            _ => None,
        };
        trial_vec.push(Trial { spikes, rates: rates_i, behavior: behavior_i });
    }
    let splits: Vec<Split> = split_bytes.iter().map(|&b| Split::from_u8(b)).collect::<Result<_>>()?;
    Ok((TrialDataset::new(trial_vec, splits)?, header.meta))
}
