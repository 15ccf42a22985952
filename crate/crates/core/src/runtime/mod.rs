//! Training, checkpoints, benchmarking and model inspection.

mod bench;
mod checkpoint;
mod inspect;
mod schedule;
mod train;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use bench::{benchmark, BenchEntry, BenchOptions, BenchReport};
pub use checkpoint::{checkpoint_records, load_checkpoint, model_from_records, save_checkpoint};
pub use inspect::{count_params, gradient_attribution, ParamCount};
pub use schedule::LinearSchedule;
pub use train::{evaluate_model, init_model, split_validation, train, EpochMetrics, TrainConfig, TrainReport};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// One JSON object per line.
pub fn to_jsonl<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
