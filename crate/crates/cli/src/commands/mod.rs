//! One module per subcommand.

pub mod adapt;
pub mod eval;
pub mod gradcheck;
pub mod pretrain;
pub mod synth;

use std::path::Path;

use crate::error::{CliError, CliResult};

/// Refuses to write into `dir` when any of `outputs` already exists there,
/// unless `force` is set. Existing files are overwritten in place.
pub fn claim_output(dir: &Path, outputs: &[&str], force: bool) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::usage(format!("{} exists and is not a directory", dir.display())));
    }
    if !force {
        if let Some(hit) = outputs.iter().map(|o| dir.join(o)).find(|p| p.exists()) {
            return Err(CliError::usage(format!("{} already exists; pass --force to overwrite", hit.display())));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collisions_need_force() {
        let dir = tempfile::tempdir().unwrap();
        claim_output(dir.path(), &["a.json"], false).unwrap();
        std::fs::write(dir.path().join("a.json"), "{}").unwrap();
        assert_eq!(claim_output(dir.path(), &["a.json"], false).unwrap_err().exit_code(), 1);
        claim_output(dir.path(), &["a.json"], true).unwrap();
        claim_output(&dir.path().join("new/deeper"), &["a.json"], false).unwrap();
        assert!(claim_output(&dir.path().join("a.json"), &[], true).is_err());
    }
}
