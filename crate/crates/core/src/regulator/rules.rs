//! The authorization rule language.
//!
//! Rules are conjunctive: a rule names a TE (by name glob or measurement),
//! a data type pattern, optionally a requester role, and a set of
//! predicates that must all hold. Variables (`?x`, `?y`) bound by the type
//! and requester patterns flow into the predicates, so one rule can say
//! "a doctor `?y` may view reports about `?x` if `?x` consented to `?y`".
//!
//! File format: one rule per line, `key=value` tokens separated by spaces,
//! `#` comments. `require=` may repeat. Example:
//!
//! ```text
//! rule=doctor-view priority=30 te=name:doctor-terminal \
//!     type=DT4/DiagnosisReport@?x requester=role:doctor:?y \
//!     require=consent(?x,consulted,?y)
//! ```
//!
//! (shown wrapped; real lines are single lines). Rules are evaluated in
//! ascending (priority, rule_id) order and the first structural match
//! wins, so overlap between rules is resolved deterministically.

use crate::crypto::hash::Digest;
use crate::identity::VidValue;
use crate::pattern::TypePattern;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuleError {
    #[error("line {0}: {1}")]
    Syntax(usize, String),
    #[error("duplicate rule id {0:?}")]
    DuplicateId(String),
    #[error("rule {rule:?}: variable ?{var} is not bound by any pattern")]
    UnboundVariable { rule: String, var: String },
}

/// How a rule selects TEs.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum TeSelector {
    Any,
    /// Glob over the approved manifest's name.
    Name(String),
    /// One exact measurement.
    Measurement(Digest),
}

/// Requester constraint for sink rules: the role credential that must be
/// presented, and the variable the requester's vid binds.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RequesterPattern {
    pub role: String,
    pub var: String,
}

/// A term in a predicate: a variable to substitute, or a literal.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Term {
    Var(String),
    Vid(VidValue),
    Org(String),
}

impl Term {
    fn parse(text: &str) -> Result<Term, String> {
        if let Some(var) = text.strip_prefix('?') {
            if var.is_empty() || !var.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(format!("bad variable {text:?}"));
            }
            return Ok(Term::Var(var.to_string()));
        }
        if let Some(hex_text) = text.strip_prefix("vid:") {
            let bytes = hex::decode(hex_text).map_err(|_| format!("bad vid literal {text:?}"))?;
            let arr: VidValue =
                bytes.try_into().map_err(|_| format!("vid literal has wrong length"))?;
            return Ok(Term::Vid(arr));
        }
        if let Some(org) = text.strip_prefix("org:") {
            if org.is_empty() {
                return Err("empty org literal".into());
            }
            return Ok(Term::Org(org.to_string()));
        }
        Err(format!("term {text:?} is neither ?var, vid:<hex>, nor org:<name>"))
    }

    fn text(&self) -> String {
        match self {
            Term::Var(v) => format!("?{v}"),
            Term::Vid(v) => format!("vid:{}", hex::encode(v)),
            Term::Org(o) => format!("org:{o}"),
        }
    }

    fn var(&self) -> Option<&str> {
        match self {
            Term::Var(v) => Some(v),
            _ => None,
        }
    }
}

/// A predicate that must hold against the regulator's recorded facts.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum PredicateTemplate {
    /// consent(subject, verb, object): the subject consented to the verb
    /// with respect to an object (a person or an organisation).
    Consent { subject: Term, verb: String, object: Term },
    /// approval(approver, subject, attribute): a recognised approver
    /// certified the attribute about the subject.
    Approval { approver: String, subject: Term, attribute: String },
}

impl PredicateTemplate {
    fn parse(text: &str) -> Result<PredicateTemplate, String> {
        let (head, rest) = text.split_once('(').ok_or("predicate missing '('")?;
        let args_text = rest.strip_suffix(')').ok_or("predicate missing ')'")?;
        let args: Vec<&str> = args_text.split(',').collect();
        match head {
            "consent" => {
                if args.len() != 3 {
                    return Err("consent takes (subject,verb,object)".into());
                }
                Ok(PredicateTemplate::Consent {
                    subject: Term::parse(args[0])?,
                    verb: args[1].to_string(),
                    object: Term::parse(args[2])?,
                })
            }
            "approval" => {
                if args.len() != 3 {
                    return Err("approval takes (approver,subject,attribute)".into());
                }
                Ok(PredicateTemplate::Approval {
                    approver: args[0].to_string(),
                    subject: Term::parse(args[1])?,
                    attribute: args[2].to_string(),
                })
            }
            other => Err(format!("unknown predicate {other:?}")),
        }
    }

    pub fn text(&self) -> String {
        match self {
            PredicateTemplate::Consent { subject, verb, object } => {
                format!("consent({},{verb},{})", subject.text(), object.text())
            }
            PredicateTemplate::Approval { approver, subject, attribute } => {
                format!("approval({approver},{},{attribute})", subject.text())
            }
        }
    }

    fn vars(&self) -> Vec<&str> {
        match self {
            PredicateTemplate::Consent { subject, object, .. } => {
                subject.var().into_iter().chain(object.var()).collect()
            }
            PredicateTemplate::Approval { subject, .. } => subject.var().into_iter().collect(),
        }
    }
}

/// One authorization rule.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AuthRule {
    pub rule_id: String,
    pub priority: i32,
    pub te: TeSelector,
    pub data_type: TypePattern,
    pub requester: Option<RequesterPattern>,
    pub required: Vec<PredicateTemplate>,
    /// Inclusive validity window in seconds; a rule outside its window
    /// does not match.
    pub validity: Option<(u64, u64)>,
}

impl AuthRule {
    /// Variables this rule's patterns can bind.
    fn bound_vars(&self) -> Vec<&str> {
        let mut vars: Vec<&str> = self.data_type.var().into_iter().collect();
        if let Some(r) = &self.requester {
            vars.push(&r.var);
        }
        vars
    }
}

/// Parses a rule file. Rules come back sorted by (priority, rule_id):
/// evaluation order equals vector order.
pub fn parse_rules(text: &str) -> Result<Vec<AuthRule>, RuleError> {
    let mut rules: Vec<AuthRule> = Vec::new();
    for (no, raw_line) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut rule_id = None;
        let mut priority = 100i32;
        let mut te = TeSelector::Any;
        let mut data_type = None;
        let mut requester = None;
        let mut required = Vec::new();
        let mut validity = None;
        for token in line.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| RuleError::Syntax(line_no, format!("token {token:?} is not key=value")))?;
            let syntax = |msg: String| RuleError::Syntax(line_no, msg);
            match key {
                "rule" => rule_id = Some(value.to_string()),
                "priority" => {
                    priority = value
                        .parse()
                        .map_err(|_| syntax(format!("bad priority {value:?}")))?;
                }
                "te" => {
                    te = if value == "*" {
                        TeSelector::Any
                    } else if let Some(name) = value.strip_prefix("name:") {
                        TeSelector::Name(name.to_string())
                    } else if let Some(hex_text) = value.strip_prefix("measurement:") {
                        let digest = Digest::from_hex(hex_text)
                            .ok_or_else(|| syntax(format!("bad measurement {value:?}")))?;
                        TeSelector::Measurement(digest)
                    } else {
                        return Err(syntax(format!("bad te selector {value:?}")));
                    };
                }
                "type" => {
                    data_type =
                        Some(TypePattern::parse(value).map_err(|e| syntax(e.to_string()))?);
                }
                "requester" => {
                    let parts: Vec<&str> = value.splitn(3, ':').collect();
                    match parts.as_slice() {
                        ["role", role, var] if var.starts_with('?') && var.len() > 1 => {
                            requester = Some(RequesterPattern {
                                role: role.to_string(),
                                var: var[1..].to_string(),
                            });
                        }
                        _ => return Err(syntax(format!("bad requester {value:?}"))),
                    }
                }
                "require" => {
                    required.push(PredicateTemplate::parse(value).map_err(|e| syntax(e))?);
                }
                "valid" => {
                    let (from, to) = value
                        .split_once("..")
                        .ok_or_else(|| syntax(format!("bad validity {value:?}")))?;
                    let from = from.parse().map_err(|_| syntax("bad validity start".into()))?;
                    let to = to.parse().map_err(|_| syntax("bad validity end".into()))?;
                    validity = Some((from, to));
                }
                other => return Err(syntax(format!("unknown key {other:?}"))),
            }
        }
        let rule_id = rule_id
            .ok_or_else(|| RuleError::Syntax(line_no, "missing rule=<id>".into()))?;
        let data_type = data_type
            .ok_or_else(|| RuleError::Syntax(line_no, "missing type=<pattern>".into()))?;
        let rule = AuthRule { rule_id, priority, te, data_type, requester, required, validity };

        // Every predicate variable must be bound by a pattern, otherwise
        // the rule could never be instantiated.
        let bound = rule.bound_vars();
        for predicate in &rule.required {
            for var in predicate.vars() {
                if !bound.contains(&var) {
                    return Err(RuleError::UnboundVariable {
                        rule: rule.rule_id.clone(),
                        var: var.to_string(),
                    });
                }
            }
        }
        if rules.iter().any(|r| r.rule_id == rule.rule_id) {
            return Err(RuleError::DuplicateId(rule.rule_id));
        }
        rules.push(rule);
    }
    rules.sort_by(|a, b| (a.priority, &a.rule_id).cmp(&(b.priority, &b.rule_id)));
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_rule() {
        let text = "rule=doctor-view priority=30 te=name:doctor-terminal \
                    type=DT4/DiagnosisReport@?x requester=role:doctor:?y \
                    require=consent(?x,consulted,?y)";
        let rules = parse_rules(text).unwrap();
        assert_eq!(rules.len(), 1);
        let r = &rules[0];
        assert_eq!(r.rule_id, "doctor-view");
        assert_eq!(r.priority, 30);
        assert_eq!(r.te, TeSelector::Name("doctor-terminal".into()));
        assert_eq!(r.requester.as_ref().unwrap().role, "doctor");
        assert_eq!(r.required.len(), 1);
        assert_eq!(r.required[0].text(), "consent(?x,consulted,?y)");
    }

    #[test]
    fn parses_literals_and_windows() {
        let vid = hex::encode([7u8; 32]);
        let text = format!(
            "rule=a type=DT1/X@?x require=consent(?x,share,org:HospitalA) valid=100..200\n\
             rule=b type=DT1/X@?x require=approval(authority,vid:{vid},flagged)\n\
             # comment\n\n\
             rule=c priority=1 te=* type=*"
        );
        let rules = parse_rules(&text).unwrap();
        // Sorted by (priority, id): c first.
        assert_eq!(rules[0].rule_id, "c");
        assert_eq!(rules[1].validity, Some((100, 200)));
        match &rules[2].required[0] {
            PredicateTemplate::Approval { subject: Term::Vid(v), .. } => assert_eq!(*v, [7u8; 32]),
            other => panic!("unexpected predicate {other:?}"),
        }
    }

    #[test]
    fn measurement_selector_round_trips() {
        let digest = crate::crypto::hash::hash(b"some code");
        let text = format!("rule=m te=measurement:{} type=DT1/X", digest.to_hex());
        let rules = parse_rules(&text).unwrap();
        assert_eq!(rules[0].te, TeSelector::Measurement(digest));
    }

    #[test]
    fn rejects_unbound_variables() {
        let err = parse_rules("rule=r type=DT1/X@?x require=consent(?x,share,?y)").unwrap_err();
        assert_eq!(err, RuleError::UnboundVariable { rule: "r".into(), var: "y".into() });
        // ?y is fine once a requester pattern binds it.
        assert!(parse_rules(
            "rule=r type=DT1/X@?x requester=role:doctor:?y require=consent(?x,share,?y)"
        )
        .is_ok());
    }

    #[test]
    fn rejects_duplicates_and_syntax_errors() {
        assert_eq!(
            parse_rules("rule=r type=DT1/X\nrule=r type=DT2/Y").unwrap_err(),
            RuleError::DuplicateId("r".into())
        );
        assert!(matches!(parse_rules("rule=r").unwrap_err(), RuleError::Syntax(1, _)));
        assert!(matches!(parse_rules("type=DT1/X").unwrap_err(), RuleError::Syntax(1, _)));
        assert!(matches!(parse_rules("rule=r type=DT1/X bogus").unwrap_err(), RuleError::Syntax(1, _)));
        assert!(matches!(
            parse_rules("rule=r type=DT1/X require=frobnicate(?x)").unwrap_err(),
            RuleError::Syntax(1, _)
        ));
        assert!(matches!(
            parse_rules("rule=r type=DT1/X requester=doctor").unwrap_err(),
            RuleError::Syntax(1, _)
        ));
    }

    #[test]
    fn deterministic_order_for_equal_priorities() {
        let rules = parse_rules("rule=beta type=DT1/X\nrule=alpha type=DT1/X").unwrap();
        assert_eq!(rules[0].rule_id, "alpha");
        assert_eq!(rules[1].rule_id, "beta");
    }
}
