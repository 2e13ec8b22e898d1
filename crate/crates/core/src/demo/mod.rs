//! Demo robots and the scripted scenarios that exercise the whole stack.

mod model;
mod nodes;
pub mod scenario;

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

pub use model::{fit_circle, goal_controller, unicycle_step, wrap_angle, CircleFit, Gains, NonFinite, UnicyclePose};
pub use nodes::{run_node, NodeOptions, NODE_KINDS, SIM_DT};
pub use scenario::{run_scenario, Harness, ScenarioError, ScenarioOptions, ScenarioReport, SCENARIOS};

use crate::bus::BusError;
use crate::launcher::MANIFEST_FILE;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DemoError {
    #[error("unknown demo node kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    NonFinite(#[from] NonFinite),
    #[error("io: {0}")]
    Io(String),
}

/// Package name → node kinds it provides.
pub const DEMO_PACKAGES: &[(&str, &[&str])] = &[
    ("demo", &["turtle_sim", "kobuki_sim", "actuator", "counter"]),
    ("move_base", &["move_base"]),
];

/// Write the demo packages under `root`, each node a small script that
/// execs `exe node <kind>`.
pub fn install(root: &Path, exe: &Path) -> io::Result<()> {
    for (package, kinds) in DEMO_PACKAGES {
        let dir = root.join(package);
        fs::create_dir_all(&dir)?;
        let mut manifest = String::new();
        for kind in *kinds {
            let script = dir.join(kind);
            fs::write(&script, format!("#!/bin/sh\nexec \"{}\" node {kind} \"$@\"\n", exe.display()))?;
            fs::set_permissions(&script, fs::Permissions::from_mode(0o755))?;
            manifest.push_str(&format!("node {kind} = {kind}\n"));
        }
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::launcher::PackageRegistry;

    #[test]
    fn installed_packages_resolve() {
        let dir = tempfile::tempdir().unwrap();
        install(dir.path(), Path::new("/bin/true")).unwrap();
        let reg = PackageRegistry::scan(vec![dir.path().to_path_buf()]);
        assert!(reg.problems().is_empty(), "{:?}", reg.problems());
        assert_eq!(reg.resolve("move_base", "move_base").unwrap(), dir.path().join("move_base/move_base"));
        assert_eq!(reg.resolve("demo", "turtle_sim").unwrap(), dir.path().join("demo/turtle_sim"));
    }
}
