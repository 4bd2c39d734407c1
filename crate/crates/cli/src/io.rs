use std::io::Write;
use std::path::{Path, PathBuf};

use bevnav_core::env::{Episode, EpisodeSet, World};

use crate::error::{CliError, Result};

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn load_world(path: &Path) -> Result<World> {
    World::from_json(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Loads each world with the episodes generated in it.
pub fn load_corpus(worlds: &[PathBuf], episodes: &[PathBuf]) -> Result<Vec<(World, Vec<Episode>)>> {
    if worlds.len() != episodes.len() {
        return Err(CliError::Usage(format!(
            "--world and --episodes pair up: got {} worlds and {} episode files",
            worlds.len(),
            episodes.len()
        )));
    }
    let mut out = Vec::with_capacity(worlds.len());
    for (w, e) in worlds.iter().zip(episodes) {
        let world = load_world(w)?;
        let set = EpisodeSet::from_json(&read_text(e)?, Some(&world))
            .map_err(|err| CliError::Data(format!("{}: {err}", e.display())))?;
        out.push((world, set.episodes));
    }
    Ok(out)
}
