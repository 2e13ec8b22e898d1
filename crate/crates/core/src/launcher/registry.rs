use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use super::LaunchError;
use crate::schema::is_identifier;

pub const MANIFEST_FILE: &str = "package.nw";
pub const PACKAGE_PATH_ENV: &str = "NW_PACKAGE_PATH";

/// Node name → executable, as listed in one package manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Package {
    pub name: String,
    pub dir: PathBuf,
    pub nodes: BTreeMap<String, PathBuf>,
}

/// Packages discovered under an ordered list of roots. A package is a
/// directory holding a `package.nw` manifest with lines of the form
/// `node <name> = <relative path>`; blank lines and `#` comments are
/// ignored. When two roots hold the same package the earlier root wins.
#[derive(Debug, Clone, Default)]
pub struct PackageRegistry {
    roots: Vec<PathBuf>,
    packages: BTreeMap<String, Package>,
    problems: Vec<String>,
}

fn is_executable(path: &Path) -> bool {
    fs::metadata(path).is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
}

pub fn parse_manifest(dir: &Path, name: &str, text: &str) -> Result<Package, String> {
    let mut nodes = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || format!("{}:{}: expected `node <name> = <path>`", dir.join(MANIFEST_FILE).display(), i + 1);
        let rest = line.strip_prefix("node").filter(|r| r.starts_with(char::is_whitespace)).ok_or_else(bad)?;
        let (node, rel) = rest.split_once('=').ok_or_else(bad)?;
        let (node, rel) = (node.trim(), rel.trim());
        if !is_identifier(node) || rel.is_empty() {
            return Err(bad());
        }
        let path = dir.join(rel);
        if !is_executable(&path) {
            return Err(format!("{}: node `{node}` points at {}, which is not an executable file", dir.display(), path.display()));
        }
        if nodes.insert(node.to_string(), path).is_some() {
            return Err(format!("{}: node `{node}` is listed twice", dir.display()));
        }
    }
    Ok(Package { name: name.to_string(), dir: dir.to_path_buf(), nodes })
}

impl PackageRegistry {
    /// Scan `roots` in order. Malformed manifests are skipped and
    /// reported through [`PackageRegistry::problems`].
    pub fn scan(roots: Vec<PathBuf>) -> PackageRegistry {
        let mut reg = PackageRegistry { roots, ..Default::default() };
        for root in reg.roots.clone() {
            let Ok(entries) = fs::read_dir(&root) else { continue };
            let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
            dirs.sort();
            for dir in dirs {
                let Some(name) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else { continue };
                if reg.packages.contains_key(&name) {
                    continue;
                }
                let Ok(text) = fs::read_to_string(dir.join(MANIFEST_FILE)) else { continue };
                match parse_manifest(&dir, &name, &text) {
                    Ok(p) => {
                        reg.packages.insert(name, p);
                    }
                    Err(e) => {
                        log::warn!("{e}");
                        reg.problems.push(e);
                    }
                }
            }
        }
        reg
    }

    /// Roots from `NW_PACKAGE_PATH`.
    pub fn from_env() -> PackageRegistry {
        let roots = std::env::var_os(PACKAGE_PATH_ENV).map(|v| std::env::split_paths(&v).collect()).unwrap_or_default();
        PackageRegistry::scan(roots)
    }

    pub fn roots(&self) -> &[PathBuf] {
        &self.roots
    }

    pub fn rescan(&self) -> PackageRegistry {
        PackageRegistry::scan(self.roots.clone())
    }

    pub fn packages(&self) -> impl Iterator<Item = &Package> {
        self.packages.values()
    }

    pub fn problems(&self) -> &[String] {
        &self.problems
    }

    pub fn resolve(&self, package: &str, node: &str) -> Result<PathBuf, LaunchError> {
        let p = self.packages.get(package).ok_or_else(|| LaunchError::NoSuchPackage(package.to_string()))?;
        p.nodes.get(node).cloned().ok_or_else(|| LaunchError::NoSuchNode(format!("{package}/{node}")))
    }
}
