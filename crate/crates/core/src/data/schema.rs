use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Trims and case-folds a feature name.
pub fn canonical_name(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Shared,
    Private,
}

/// Ordered feature names of one dataset with their shared/private roles.
///
/// Roles default to private until the schema is aligned with its partner.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    features: Vec<String>,
    roles: Vec<Role>,
}

impl FeatureSchema {
    /// Canonicalises names and rejects duplicates.
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut features = Vec::with_capacity(names.len());
        for n in names {
            let c = canonical_name(&n);
            if c.is_empty() {
                return Err(Error::Config("empty feature name".into()));
            }
            if !seen.insert(c.clone()) {
                return Err(Error::DuplicateFeature(c));
            }
            features.push(c);
        }
        let roles = vec![Role::Private; features.len()];
        Ok(Self { features, roles })
    }

    pub fn names(&self) -> &[String] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.position(name).map(|i| self.roles[i])
    }

    pub fn shared(&self) -> Vec<String> {
        self.with_role(Role::Shared)
    }

    pub fn private(&self) -> Vec<String> {
        self.with_role(Role::Private)
    }

    fn with_role(&self, role: Role) -> Vec<String> {
        self.features
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == role)
            .map(|(f, _)| f.clone())
            .collect()
    }

    /// Number of shared features (`M`).
    pub fn shared_count(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::Shared).count()
    }

    /// Copy with the given names marked shared and every other feature private.
    pub fn tagged(&self, shared: &[String]) -> Self {
        let set: BTreeSet<&str> = shared.iter().map(String::as_str).collect();
        Self {
            features: self.features.clone(),
            roles: self
                .features
                .iter()
                .map(|f| if set.contains(f.as_str()) { Role::Shared } else { Role::Private })
                .collect(),
        }
    }
}

/// Shared/private partition of a source and target schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Intersection in source order.
    pub shared: Vec<String>,
    pub source_private: Vec<String>,
    pub target_private: Vec<String>,
    /// Set when the schemas share no features.
    pub warning: Option<String>,
}

impl Alignment {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.shared.len(), self.source_private.len(), self.target_private.len())
    }

    pub fn source_schema(&self, src: &FeatureSchema) -> FeatureSchema {
        src.tagged(&self.shared)
    }

    pub fn target_schema(&self, tar: &FeatureSchema) -> FeatureSchema {
        tar.tagged(&self.shared)
    }
}

/// Partitions two schemas into shared and private features.
pub fn align_schemas(src: &FeatureSchema, tar: &FeatureSchema) -> Alignment {
    let shared: Vec<String> = src.names().iter().filter(|f| tar.contains(f)).cloned().collect();
    let source_private = src.names().iter().filter(|f| !tar.contains(f)).cloned().collect();
    let target_private = tar.names().iter().filter(|f| !src.contains(f)).cloned().collect();
    let warning = shared.is_empty().then(|| {
        let msg = "source and target schemas share no features".to_string();
        log::warn!("{msg}");
        msg
    });
    Alignment {
        shared,
        source_private,
        target_private,
        warning,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(names: &[&str]) -> FeatureSchema {
        FeatureSchema::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn canonicalises_and_rejects_duplicates() {
        let s = schema(&["  Heart Rate ", "WBC"]);
        assert_eq!(s.names(), &["heart rate".to_string(), "wbc".to_string()]);
        assert!(matches!(
            FeatureSchema::new(vec!["WBC".into(), "wbc ".into()]),
            Err(Error::DuplicateFeature(_))
        ));
    }

    #[test]
    fn identical_schemas_are_all_shared() {
        let s = schema(&["a", "b", "c"]);
        let a = align_schemas(&s, &s);
        assert_eq!(a.counts(), (3, 0, 0));
        assert!(a.warning.is_none());
    }

    #[test]
    fn disjoint_schemas_warn() {
        let a = align_schemas(&schema(&["a", "b"]), &schema(&["c"]));
        assert_eq!(a.counts(), (0, 2, 1));
        assert!(a.warning.is_some());
    }

    #[test]
    fn partial_overlap_counts() {
        // 34 source features, 75 target features, 18 in common.
        let src: Vec<String> = (0..34).map(|i| format!("f{i:02}")).collect();
        let mut tar: Vec<String> = (16..34).map(|i| format!("f{i:02}")).collect();
        tar.extend((0..57).map(|i| format!("t{i:02}")));
        let a = align_schemas(&FeatureSchema::new(src).unwrap(), &FeatureSchema::new(tar).unwrap());
        assert_eq!(a.counts(), (18, 16, 57));
    }

    #[test]
    fn shared_set_is_symmetric_and_keeps_source_order() {
        let s = schema(&["x", "b", "a", "q"]);
        let t = schema(&["a", "z", "b", "x"]);
        let ab = align_schemas(&s, &t);
        let ba = align_schemas(&t, &s);
        assert_eq!(ab.shared, vec!["x", "b", "a"]);
        let mut l = ab.shared.clone();
        let mut r = ba.shared.clone();
        l.sort();
        r.sort();
        assert_eq!(l, r);
        let tagged = ab.target_schema(&t);
        assert_eq!(tagged.role("z"), Some(Role::Private));
        assert_eq!(tagged.role("a"), Some(Role::Shared));
        assert_eq!(tagged.shared_count(), 3);
    }
}
