//! Name-keyed registries of interchangeable strategies.
//!
//! Every family of swappable behaviour (classification losses, pseudo-label
//! regression filters, teacher update rules, augmentation ops) is a trait
//! object registered under a stable name. Configs refer to strategies by
//! name and resolve them here at load time.

use std::collections::BTreeMap;
use std::sync::Arc;

/// Implemented by every registrable strategy.
pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized + Named> {
    family: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(family: &'static str) -> Self {
        Self { family, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, entry: Arc<T>) {
        self.entries.insert(entry.name(), entry);
    }

    pub fn with(mut self, entry: Arc<T>) -> Self {
        self.register(entry);
        self
    }

    pub fn get(&self, name: &str) -> Option<Arc<T>> {
        self.entries.get(name).cloned()
    }

    pub fn resolve(&self, name: &str) -> Result<Arc<T>, UnknownStrategy> {
        self.get(name).ok_or_else(|| UnknownStrategy {
            family: self.family,
            name: name.to_string(),
            known: self.names().iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn family(&self) -> &'static str {
        self.family
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unknown {family} '{name}' (known: {})", known.join(", "))]
pub struct UnknownStrategy {
    pub family: &'static str,
    pub name: String,
    pub known: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Named {
        fn greet(&self) -> String;
    }

    struct Hello;
    impl Named for Hello {
        fn name(&self) -> &'static str {
            "hello"
        }
    }
    impl Greeter for Hello {
        fn greet(&self) -> String {
            "hi".into()
        }
    }

    #[test]
    fn resolve_by_name() {
        let reg: Registry<dyn Greeter> = Registry::new("greeter").with(Arc::new(Hello));
        assert_eq!(reg.resolve("hello").unwrap().greet(), "hi");
        let err = reg.resolve("bye").err().unwrap();
        assert_eq!(err.family, "greeter");
        assert!(err.to_string().contains("known: hello"));
    }
}
