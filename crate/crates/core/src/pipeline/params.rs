use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::schema::is_identifier;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("`{0}` is not a valid parameter name")]
pub struct InvalidIdentifier(pub String);

type Listener = Arc<dyn Fn(&str, f64, u64) + Send + Sync>;

/// Named f64 parameters shared by pipelines, the shell and the control
/// API. Each key carries a version that increases with every write.
#[derive(Default)]
pub struct ParamStore {
    values: RwLock<BTreeMap<String, (f64, u64)>>,
    warned: Mutex<HashSet<String>>,
    listeners: RwLock<Vec<Listener>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store a value and return its new version.
    pub fn set(&self, name: &str, value: f64) -> Result<u64, InvalidIdentifier> {
        if !is_identifier(name) {
            return Err(InvalidIdentifier(name.to_string()));
        }
        let version = {
            let mut values = self.values.write();
            let slot = values.entry(name.to_string()).or_insert((0.0, 0));
            slot.0 = value;
            slot.1 += 1;
            slot.1
        };
        for l in self.listeners.read().iter() {
            l(name, value, version);
        }
        Ok(version)
    }

    pub fn get(&self, name: &str) -> Option<(f64, u64)> {
        self.values.read().get(name).copied()
    }

    /// Value for an expression: unknown names read as 0.0, with one
    /// warning per name.
    pub fn read(&self, name: &str) -> f64 {
        if let Some((v, _)) = self.get(name) {
            return v;
        }
        if self.warned.lock().insert(name.to_string()) {
            log::warn!("parameter `{name}` is not set; reading 0.0");
        }
        0.0
    }

    pub fn snapshot(&self) -> BTreeMap<String, f64> {
        self.values.read().iter().map(|(k, (v, _))| (k.clone(), *v)).collect()
    }

    /// Call `f(name, value, version)` after every write.
    pub fn on_change(&self, f: impl Fn(&str, f64, u64) + Send + Sync + 'static) {
        self.listeners.write().push(Arc::new(f));
    }
}
