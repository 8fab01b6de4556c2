//! Procedural-state data model.
//!
//! A procedural state abstracts one execution stage into four closed-vocabulary
//! fields (action, entity shape, end-effector orientation, target point) plus a
//! free-form subtask phrase that is carried for readability and never matched.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("unexpected key `{0}`")]
    ExtraKey(String),
    #[error("invalid value {value:?} for field `{field}`")]
    InvalidEnumValue { field: String, value: String },
    #[error("state must be a JSON object of strings: {0}")]
    NotAnObject(String),
}

macro_rules! closed_enum {
    (
        $(#[$meta:meta])*
        $name:ident, $field:literal { $($variant:ident => $text:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const FIELD_NAME: &'static str = $field;

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            /// Trims and matches case-insensitively.
            pub fn parse(raw: &str) -> Result<Self, SchemaError> {
                let norm = raw.trim().to_ascii_lowercase();
                match norm.as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(SchemaError::InvalidEnumValue {
                        field: $field.to_string(),
                        value: raw.to_string(),
                    }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

closed_enum!(
    /// Action type `a`.
    Action, "action" {
        Pick => "pick",
        Place => "place",
        Press => "press",
        Push => "push",
        Drag => "drag",
    }
);

closed_enum!(
    /// Object geometry `o`.
    EntityShape, "entity_shape" {
        OpenContainer => "open_container",
        Cuboid => "cuboid",
        Spherical => "spherical",
        Handle => "handle",
        LyingCylindrical => "lying_cylindrical",
        UprightCylindrical => "upright_cylindrical",
        Other => "other",
    }
);

closed_enum!(
    /// End-effector orientation `e`.
    EeOrientation, "ee_orientation" {
        Vertical => "vertical",
        Horizontal => "horizontal",
    }
);

closed_enum!(
    /// Target interaction point `p`.
    TargetPoint, "target_point" {
        Front => "front",
        Back => "back",
        Left => "left",
        Right => "right",
        Center => "center",
        Midpoint => "midpoint",
        End => "end",
        Top => "top",
        Rim => "rim",
    }
);

/// The four fields that participate in matching. `subtask` is deliberately
/// not representable here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Action,
    EntityShape,
    EeOrientation,
    TargetPoint,
}

impl Field {
    pub const ALL: [Field; 4] = [
        Field::Action,
        Field::EntityShape,
        Field::EeOrientation,
        Field::TargetPoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Action => Action::FIELD_NAME,
            Field::EntityShape => EntityShape::FIELD_NAME,
            Field::EeOrientation => EeOrientation::FIELD_NAME,
            Field::TargetPoint => TargetPoint::FIELD_NAME,
        }
    }

    /// Every allowed value for this field, in vocabulary order.
    pub fn values(self) -> Vec<&'static str> {
        match self {
            Field::Action => Action::ALL.iter().map(|v| v.as_str()).collect(),
            Field::EntityShape => EntityShape::ALL.iter().map(|v| v.as_str()).collect(),
            Field::EeOrientation => EeOrientation::ALL.iter().map(|v| v.as_str()).collect(),
            Field::TargetPoint => TargetPoint::ALL.iter().map(|v| v.as_str()).collect(),
        }
    }
}

const SUBTASK_KEY: &str = "subtask";
const STATE_KEYS: [&str; 5] = [
    SUBTASK_KEY,
    Action::FIELD_NAME,
    EntityShape::FIELD_NAME,
    EeOrientation::FIELD_NAME,
    TargetPoint::FIELD_NAME,
];

/// One structured execution-stage descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct ProceduralState {
    pub subtask: String,
    pub action: Action,
    pub entity_shape: EntityShape,
    pub ee_orientation: EeOrientation,
    pub target_point: TargetPoint,
}

impl ProceduralState {
    pub fn new(
        subtask: impl Into<String>,
        action: Action,
        entity_shape: EntityShape,
        ee_orientation: EeOrientation,
        target_point: TargetPoint,
    ) -> Self {
        Self {
            subtask: subtask.into(),
            action,
            entity_shape,
            ee_orientation,
            target_point,
        }
    }

    /// Builds a state from a raw key/value map, requiring exactly the five schema keys.
    pub fn validate(raw: &BTreeMap<String, String>) -> Result<Self, SchemaError> {
        if let Some(extra) = raw.keys().find(|k| !STATE_KEYS.contains(&k.as_str())) {
            return Err(SchemaError::ExtraKey(extra.clone()));
        }
        let get = |key: &str| {
            raw.get(key)
                .ok_or_else(|| SchemaError::MissingKey(key.to_string()))
        };
        Ok(Self {
            subtask: get(SUBTASK_KEY)?.clone(),
            action: Action::parse(get(Action::FIELD_NAME)?)?,
            entity_shape: EntityShape::parse(get(EntityShape::FIELD_NAME)?)?,
            ee_orientation: EeOrientation::parse(get(EeOrientation::FIELD_NAME)?)?,
            target_point: TargetPoint::parse(get(TargetPoint::FIELD_NAME)?)?,
        })
    }

    /// Validates a JSON value. Non-string values are rejected with the field named.
    pub fn from_json_value(value: &serde_json::Value) -> Result<Self, SchemaError> {
        let obj = value
            .as_object()
            .ok_or_else(|| SchemaError::NotAnObject(value.to_string()))?;
        let mut raw = BTreeMap::new();
        for (k, v) in obj {
            let s = v.as_str().ok_or_else(|| SchemaError::InvalidEnumValue {
                field: k.clone(),
                value: v.to_string(),
            })?;
            raw.insert(k.clone(), s.to_string());
        }
        Self::validate(&raw)
    }

    pub fn from_json_str(text: &str) -> Result<Self, SchemaError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SchemaError::NotAnObject(e.to_string()))?;
        Self::from_json_value(&value)
    }

    pub fn to_raw(&self) -> BTreeMap<String, String> {
        STATE_KEYS
            .iter()
            .map(|k| (k.to_string(), self.raw_value(k).to_string()))
            .collect()
    }

    /// Compact canonical JSON: sorted keys, lowercase enum values, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&self.to_raw()).expect("string map serializes")
    }

    fn raw_value(&self, key: &str) -> &str {
        match key {
            SUBTASK_KEY => &self.subtask,
            "action" => self.action.as_str(),
            "entity_shape" => self.entity_shape.as_str(),
            "ee_orientation" => self.ee_orientation.as_str(),
            "target_point" => self.target_point.as_str(),
            _ => unreachable!("not a schema key"),
        }
    }

    pub fn field_value(&self, field: Field) -> &'static str {
        match field {
            Field::Action => self.action.as_str(),
            Field::EntityShape => self.entity_shape.as_str(),
            Field::EeOrientation => self.ee_orientation.as_str(),
            Field::TargetPoint => self.target_point.as_str(),
        }
    }

    /// `"<field_name>: <value>"`, the exact string that gets embedded.
    pub fn canonical_field_text(&self, field: Field) -> String {
        format!("{}: {}", field.name(), self.field_value(field))
    }

    /// Equality on the four matched fields; `subtask` is ignored.
    pub fn same_stage(&self, other: &Self) -> bool {
        self.action == other.action
            && self.entity_shape == other.entity_shape
            && self.ee_orientation == other.ee_orientation
            && self.target_point == other.target_point
    }
}

impl TryFrom<BTreeMap<String, String>> for ProceduralState {
    type Error = SchemaError;

    fn try_from(raw: BTreeMap<String, String>) -> Result<Self, Self::Error> {
        Self::validate(&raw)
    }
}

impl From<ProceduralState> for BTreeMap<String, String> {
    fn from(state: ProceduralState) -> Self {
        state.to_raw()
    }
}

impl fmt::Display for ProceduralState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.action, self.entity_shape, self.ee_orientation, self.target_point
        )
    }
}

/// Every canonical field text in vocabulary order (field-major).
pub fn canonical_vocabulary() -> Vec<String> {
    Field::ALL
        .iter()
        .flat_map(|f| f.values().into_iter().map(move |v| format!("{}: {}", f.name(), v)))
        .collect()
}

/// Ordered procedural states of one memory. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StateSequenceRepr")]
pub struct StateSequence {
    task_id: String,
    states: Vec<ProceduralState>,
}

#[derive(Deserialize)]
struct StateSequenceRepr {
    task_id: String,
    states: Vec<ProceduralState>,
}

impl TryFrom<StateSequenceRepr> for StateSequence {
    type Error = String;

    fn try_from(r: StateSequenceRepr) -> Result<Self, Self::Error> {
        StateSequence::new(r.task_id, r.states).ok_or_else(|| "empty state sequence".to_string())
    }
}

impl StateSequence {
    /// `None` when `states` is empty.
    pub fn new(task_id: impl Into<String>, states: Vec<ProceduralState>) -> Option<Self> {
        if states.is_empty() {
            return None;
        }
        Some(Self {
            task_id: task_id.into(),
            states,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn states(&self) -> &[ProceduralState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step_index: u64,
    pub observation_ref: String,
    pub state: ProceduralState,
}

/// Drops every entry whose matched fields equal the previously retained entry.
pub fn dedup_history(entries: &[HistoryEntry]) -> Vec<HistoryEntry> {
    let mut out: Vec<HistoryEntry> = Vec::with_capacity(entries.len());
    for entry in entries {
        match out.last() {
            Some(last) if last.state.same_stage(&entry.state) => {}
            _ => out.push(entry.clone()),
        }
    }
    out
}
