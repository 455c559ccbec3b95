//! Field selection over the trip document.
//!
//! A selection is a JSON object whose keys are section names (`profile`,
//! `bookings`, `flights`, `payments`). A section maps to `true` for every
//! field, or to an object naming fields with `true`:
//!
//! ```json
//! {"profile": {"name": true}, "bookings": {"booking_id": true, "status": true}}
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{Map, Value};
use thiserror::Error;

pub const SECTIONS: [&str; 4] = ["bookings", "flights", "payments", "profile"];

/// Fields each section exposes.
pub fn schema(section: &str) -> Option<&'static [&'static str]> {
    Some(match section {
        "profile" => &["user_id", "name", "preferences", "loyalty_points"],
        "bookings" => &["booking_id", "user_id", "flight_id", "seats", "status", "payment_id", "created_ts"],
        "flights" => &[
            "flight_id",
            "origin",
            "destination",
            "departure_ts",
            "date",
            "capacity",
            "seats_available",
            "price",
        ],
        "payments" => &["payment_id", "booking_id", "user_id", "amount", "status"],
        _ => return None,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectionError {
    #[error("unknown section {0}")]
    UnknownSection(String),
    #[error("unknown field {section}.{field}")]
    UnknownField { section: String, field: String },
    #[error("malformed selection: {0}")]
    Malformed(String),
}

/// Parsed selection: section → chosen fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection(pub BTreeMap<String, BTreeSet<String>>);

impl Selection {
    /// Every field of every section.
    pub fn full() -> Self {
        Selection(
            SECTIONS
                .iter()
                .map(|s| {
                    let fields = schema(s).unwrap().iter().map(|f| f.to_string()).collect();
                    (s.to_string(), fields)
                })
                .collect(),
        )
    }

    pub fn parse(v: &Value) -> Result<Self, SelectionError> {
        let Some(obj) = v.as_object() else {
            return Err(SelectionError::Malformed("selection must be an object".into()));
        };
        let mut out = BTreeMap::new();
        for (section, sel) in obj {
            let Some(fields) = schema(section) else {
                return Err(SelectionError::UnknownSection(section.clone()));
            };
            let chosen: BTreeSet<String> = match sel {
                Value::Bool(true) => fields.iter().map(|f| f.to_string()).collect(),
                Value::Object(m) => {
                    let mut chosen = BTreeSet::new();
                    for (field, flag) in m {
                        if !fields.contains(&field.as_str()) {
                            return Err(SelectionError::UnknownField {
                                section: section.clone(),
                                field: field.clone(),
                            });
                        }
                        if flag != &Value::Bool(true) {
                            return Err(SelectionError::Malformed(format!(
                                "{section}.{field} must be true"
                            )));
                        }
                        chosen.insert(field.clone());
                    }
                    chosen
                }
                _ => {
                    return Err(SelectionError::Malformed(format!(
                        "{section} must be true or an object"
                    )))
                }
            };
            out.insert(section.clone(), chosen);
        }
        Ok(Selection(out))
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (section, fields) in &self.0 {
            let f: Map<String, Value> = fields.iter().map(|f| (f.clone(), Value::Bool(true))).collect();
            m.insert(section.clone(), Value::Object(f));
        }
        Value::Object(m)
    }
}

fn project_object(v: &Value, fields: &BTreeSet<String>) -> Value {
    match v.as_object() {
        Some(o) => Value::Object(
            fields
                .iter()
                .filter_map(|f| o.get(f).map(|x| (f.clone(), x.clone())))
                .collect(),
        ),
        None => v.clone(),
    }
}

/// Keeps only `fields` of a section value (an object or a list of objects).
pub fn project(section_value: &Value, fields: &BTreeSet<String>) -> Value {
    match section_value {
        Value::Array(items) => Value::Array(items.iter().map(|i| project_object(i, fields)).collect()),
        other => project_object(other, fields),
    }
}

/// Marker placed in a section whose service failed.
pub fn section_error(message: &str) -> Value {
    serde_json::json!({ "error": message })
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn parses_nested_and_whole_sections() {
        let s = Selection::parse(&json!({"profile": {"name": true}, "flights": true})).unwrap();
        assert_eq!(s.0["profile"].len(), 1);
        assert_eq!(s.0["flights"].len(), 8);
        assert!(!s.0.contains_key("bookings"));
    }

    #[test]
    fn unknown_names_are_rejected() {
        let e = Selection::parse(&json!({"profile": {"frequentFlyerShoeSize": true}})).unwrap_err();
        assert!(matches!(e, SelectionError::UnknownField { .. }));
        let e = Selection::parse(&json!({"hotels": true})).unwrap_err();
        assert!(matches!(e, SelectionError::UnknownSection(_)));
        assert!(Selection::parse(&json!(["profile"])).is_err());
        assert!(Selection::parse(&json!({"profile": {"name": 1}})).is_err());
    }

    #[test]
    fn projection_drops_unselected_fields() {
        let fields: BTreeSet<String> = ["a".to_string()].into();
        assert_eq!(project(&json!({"a": 1, "b": 2}), &fields), json!({"a": 1}));
        assert_eq!(project(&json!([{"a": 1, "b": 2}, {"b": 3}]), &fields), json!([{"a": 1}, {}]));
    }

    #[test]
    fn full_selection_round_trips() {
        let full = Selection::full();
        assert_eq!(Selection::parse(&full.to_json()).unwrap(), full);
    }
}
