//! Type patterns: how manifests, rules and consent scopes refer to sets of
//! data types without naming a concrete subject.
//!
//! A pattern is a name glob plus a subject position. `DT2/MRIScan@?x`
//! matches any `DT2/MRIScan` record and binds its subject to the variable
//! `x`; rule evaluation unifies such bindings across the patterns of one
//! rule, so a single `?x` can tie the data subject to a consent predicate.

use crate::crypto::envelope::{Subject, TypeId, VID_LEN};
use std::collections::BTreeMap;
use thiserror::Error;

/// Variable bindings accumulated while matching one rule: name → vid.
pub type Binding = BTreeMap<String, [u8; VID_LEN]>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatternError {
    #[error("empty pattern")]
    Empty,
    #[error("invalid variable name {0:?}")]
    BadVar(String),
    #[error("subject position is neither '-', '*', '?var' nor 64 hex digits: {0:?}")]
    BadSubject(String),
}

/// The subject position of a pattern.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum SubjectPattern {
    /// Matches any subject, including none. Written without an `@` suffix
    /// or as `@*`.
    Any,
    /// Matches only subjectless records. Written `@-`.
    NoSubject,
    /// Matches any concrete subject and binds it. Written `@?x`.
    Var(String),
    /// Matches one concrete subject. Written `@<64 hex digits>`.
    Exact([u8; VID_LEN]),
}

/// A pattern over data types.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TypePattern {
    name_glob: String,
    subject: SubjectPattern,
}

impl TypePattern {
    pub fn parse(text: &str) -> Result<TypePattern, PatternError> {
        let (name, subject) = match text.split_once('@') {
            None => (text, SubjectPattern::Any),
            Some((name, "*")) => (name, SubjectPattern::Any),
            Some((name, "-")) => (name, SubjectPattern::NoSubject),
            Some((name, var)) if var.starts_with('?') => {
                let var = &var[1..];
                if var.is_empty()
                    || !var.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                {
                    return Err(PatternError::BadVar(var.to_string()));
                }
                (name, SubjectPattern::Var(var.to_string()))
            }
            Some((name, hex_text)) => {
                let bytes =
                    hex::decode(hex_text).map_err(|_| PatternError::BadSubject(hex_text.into()))?;
                let arr: [u8; VID_LEN] =
                    bytes.try_into().map_err(|_| PatternError::BadSubject(hex_text.into()))?;
                (name, SubjectPattern::Exact(arr))
            }
        };
        if name.is_empty() {
            return Err(PatternError::Empty);
        }
        Ok(TypePattern { name_glob: name.to_string(), subject })
    }

    pub fn subject_pattern(&self) -> &SubjectPattern {
        &self.subject
    }

    /// The variable this pattern binds, if any.
    pub fn var(&self) -> Option<&str> {
        match &self.subject {
            SubjectPattern::Var(v) => Some(v),
            _ => None,
        }
    }

    /// Canonical text form (parse · text = identity).
    pub fn text(&self) -> String {
        match &self.subject {
            SubjectPattern::Any => self.name_glob.clone(),
            SubjectPattern::NoSubject => format!("{}@-", self.name_glob),
            SubjectPattern::Var(v) => format!("{}@?{}", self.name_glob, v),
            SubjectPattern::Exact(vid) => format!("{}@{}", self.name_glob, hex::encode(vid)),
        }
    }

    /// Plain match, ignoring variables (a variable position matches any
    /// concrete subject).
    pub fn matches(&self, type_id: &TypeId, subject: &Subject) -> bool {
        let mut scratch = Binding::new();
        self.unify(type_id, subject, &mut scratch)
    }

    /// Match under unification: variable positions must be consistent with
    /// (and extend) `binding`. Returns false without modifying observable
    /// results on mismatch; on success the binding is extended in place.
    pub fn unify(&self, type_id: &TypeId, subject: &Subject, binding: &mut Binding) -> bool {
        if !glob_match(&self.name_glob, type_id.name()) {
            return false;
        }
        match (&self.subject, subject) {
            (SubjectPattern::Any, _) => true,
            (SubjectPattern::NoSubject, Subject::None) => true,
            (SubjectPattern::NoSubject, Subject::Vid(_)) => false,
            (SubjectPattern::Exact(want), Subject::Vid(have)) => want == have,
            (SubjectPattern::Exact(_), Subject::None) => false,
            (SubjectPattern::Var(name), Subject::Vid(have)) => match binding.get(name) {
                Some(bound) => bound == have,
                None => {
                    binding.insert(name.clone(), *have);
                    true
                }
            },
            (SubjectPattern::Var(_), Subject::None) => false,
        }
    }
}

impl std::fmt::Display for TypePattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text())
    }
}

/// Glob match where `*` spans any (possibly empty) run of characters.
/// Linear two-pointer algorithm with star backtracking.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tid(name: &str, subject: &Subject) -> TypeId {
        TypeId::for_subject(name, subject).unwrap()
    }

    #[test]
    fn glob_cases() {
        assert!(glob_match("DT2/MRIScan", "DT2/MRIScan"));
        assert!(glob_match("DT2/*", "DT2/MRIScan"));
        assert!(glob_match("*", "anything"));
        assert!(glob_match("*Scan", "DT2/MRIScan"));
        assert!(glob_match("DT*Scan", "DT2/MRIScan"));
        assert!(!glob_match("DT2/*", "DT3/MRIScan"));
        assert!(!glob_match("DT2/MRIScan", "DT2/MRIScan2"));
        assert!(glob_match("**", ""));
        assert!(!glob_match("a*b", "a"));
    }

    #[test]
    fn parse_forms_round_trip() {
        for text in ["DT2/MRIScan", "DT2/*@?x", "CT1/Gps@-", "DT4/R@*"] {
            let p = TypePattern::parse(text).unwrap();
            let canonical = p.text();
            assert_eq!(TypePattern::parse(&canonical).unwrap(), p);
        }
        // @* canonicalises to the bare form.
        assert_eq!(TypePattern::parse("DT4/R@*").unwrap().text(), "DT4/R");
        let exact = format!("DT1/A@{}", hex::encode([1u8; 32]));
        assert_eq!(TypePattern::parse(&exact).unwrap().text(), exact);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(TypePattern::parse("").is_err());
        assert!(TypePattern::parse("@?x").is_err());
        assert!(TypePattern::parse("DT1@?").is_err());
        assert!(TypePattern::parse("DT1@?a-b").is_err());
        assert!(TypePattern::parse("DT1@xyz").is_err());
    }

    #[test]
    fn subject_positions() {
        let vid = [3u8; 32];
        let with = Subject::Vid(vid);
        let without = Subject::None;

        let any = TypePattern::parse("DT/*").unwrap();
        assert!(any.matches(&tid("DT/A", &with), &with));
        assert!(any.matches(&tid("DT/A", &without), &without));

        let none = TypePattern::parse("DT/A@-").unwrap();
        assert!(none.matches(&tid("DT/A", &without), &without));
        assert!(!none.matches(&tid("DT/A", &with), &with));

        let exact = TypePattern::parse(&format!("DT/A@{}", hex::encode(vid))).unwrap();
        assert!(exact.matches(&tid("DT/A", &with), &with));
        assert!(!exact.matches(&tid("DT/A", &Subject::Vid([4u8; 32])), &Subject::Vid([4u8; 32])));
    }

    #[test]
    fn unification_is_consistent() {
        let vid_a = [1u8; 32];
        let vid_b = [2u8; 32];
        let p = TypePattern::parse("DT/A@?x").unwrap();
        let mut binding = Binding::new();
        assert!(p.unify(&tid("DT/A", &Subject::Vid(vid_a)), &Subject::Vid(vid_a), &mut binding));
        assert_eq!(binding.get("x"), Some(&vid_a));
        // Same variable, same subject: fine.
        assert!(p.unify(&tid("DT/A", &Subject::Vid(vid_a)), &Subject::Vid(vid_a), &mut binding));
        // Same variable, different subject: mismatch.
        assert!(!p.unify(&tid("DT/A", &Subject::Vid(vid_b)), &Subject::Vid(vid_b), &mut binding));
        // Variables do not match subjectless records.
        assert!(!p.unify(&tid("DT/A", &Subject::None), &Subject::None, &mut binding));
    }
}
