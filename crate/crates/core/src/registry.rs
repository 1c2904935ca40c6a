//! Name-keyed registries for interchangeable strategies.
//!
//! Every pluggable algorithm family (density model, screen-bound strategy,
//! and the synthetic scenes/textures of the training crate) is a trait
//! object. A [`Registry`] maps a stable name to a constructor so variants
//! can be picked from config files and the command line.

use std::fmt;
use std::sync::Arc;

use crate::error::{QgsError, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, Box<dyn Fn() -> Arc<T> + Send + Sync>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers a constructor. A later registration under the same name
    /// replaces the earlier one.
    pub fn register<F>(&mut self, name: &'static str, ctor: F) -> &mut Self
    where
        F: Fn() -> Arc<T> + Send + Sync + 'static,
    {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, Box::new(ctor)));
        self
    }

    pub fn create(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ctor)| ctor())
            .ok_or_else(|| QgsError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Send + Sync {
        fn hello(&self) -> &'static str;
    }
    struct En;
    impl Greeter for En {
        fn hello(&self) -> &'static str {
            "hello"
        }
    }
    struct Fr;
    impl Greeter for Fr {
        fn hello(&self) -> &'static str {
            "bonjour"
        }
    }

    #[test]
    fn create_by_name_and_reject_unknown() {
        let mut reg: Registry<dyn Greeter> = Registry::new("greeter");
        reg.register("en", || Arc::new(En)).register("fr", || Arc::new(Fr));
        assert_eq!(reg.create("fr").unwrap().hello(), "bonjour");
        assert_eq!(reg.names(), vec!["en", "fr"]);
        let err = reg.create("de").err().unwrap();
        assert!(err.to_string().contains("en, fr"));
    }

    #[test]
    fn re_registering_replaces() {
        let mut reg: Registry<dyn Greeter> = Registry::new("greeter");
        reg.register("x", || Arc::new(En)).register("x", || Arc::new(Fr));
        assert_eq!(reg.names().len(), 1);
        assert_eq!(reg.create("x").unwrap().hello(), "bonjour");
    }
}
