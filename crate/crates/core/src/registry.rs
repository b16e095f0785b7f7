//! Name-keyed registries for runtime-selectable strategies.
//!
//! Token selectors (greedy, nucleus) and logit providers (reference LM,
//! remote server, uniform stub) are all looked up through a [`Registry`] so
//! config files and CLI flags can pick them by name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// An ordered map from strategy name to constructor.
pub struct Registry<F> {
    kind: &'static str,
    entries: BTreeMap<String, F>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    /// Registers `ctor` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, ctor: F) -> &mut Self {
        self.entries.insert(name.into(), ctor);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_unknown_name() {
        let mut reg: Registry<fn() -> u32> = Registry::new("widget");
        reg.register("one", || 1).register("two", || 2);
        assert_eq!((reg.get("two").unwrap())(), 2);
        assert_eq!(reg.names(), vec!["one", "two"]);
        let err = reg.get("three").err().unwrap().to_string();
        assert!(err.contains("unknown widget \"three\""), "{err}");
        assert!(err.contains("one, two"), "{err}");
    }
}
