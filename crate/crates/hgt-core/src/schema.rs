//! Expert-knowledge hypergraph schemas.
//!
//! A [`GraphSchema`] declares typed concept nodes, hyperedges over them, and
//! bindings from dataset label columns to graph elements. Schemas are data:
//! they serialize to a human-readable TOML file and the canonical
//! per-task schemas built here round-trip through that format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Prediction-task identity.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TaskId {
    Triplet,
    Cvs,
    Clipping,
    ClippingWithCvsPrior,
    /// Any task declared purely by a schema file.
    Custom(String),
}

impl TaskId {
    pub fn as_str(&self) -> &str {
        match self {
            TaskId::Triplet => "triplet",
            TaskId::Cvs => "cvs",
            TaskId::Clipping => "clipping",
            TaskId::ClippingWithCvsPrior => "clipping_with_cvs_prior",
            TaskId::Custom(s) => s,
        }
    }

    pub fn parse(s: &str) -> TaskId {
        match s {
            "triplet" => TaskId::Triplet,
            "cvs" => TaskId::Cvs,
            "clipping" => TaskId::Clipping,
            "clipping_with_cvs_prior" => TaskId::ClippingWithCvsPrior,
            other => TaskId::Custom(other.to_string()),
        }
    }

    /// Tasks whose schemas may carry criterion/composite nodes.
    pub fn is_cvs_related(&self) -> bool {
        matches!(self, TaskId::Cvs | TaskId::ClippingWithCvsPrior)
    }

    /// Tasks whose schemas must not contain dangling nodes.
    pub fn requires_connected_nodes(&self) -> bool {
        matches!(
            self,
            TaskId::Cvs | TaskId::Clipping | TaskId::ClippingWithCvsPrior
        )
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for TaskId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(TaskId::parse(&s))
    }
}

/// Task identity plus the windows and label vocabulary it is evaluated on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Seconds of history before the current frame (1 FPS grid).
    pub past_window: usize,
    /// Prediction horizon in seconds.
    pub horizon: usize,
    /// Ordered label column names; binding indices point into this list.
    pub labels: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Tool,
    Action,
    Target,
    Criterion,
    Composite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptNode {
    pub id: String,
    pub kind: NodeKind,
    /// Index of the dataset label column supervising this node, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperEdge {
    pub id: String,
    /// Incident node ids; the order is fixed and defines the concatenation
    /// order of node states in the edge update.
    pub nodes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSchema {
    pub version: u32,
    pub task: TaskSpec,
    pub nodes: Vec<ConceptNode>,
    pub edges: Vec<HyperEdge>,
}

/// Reference to a schema element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementRef {
    Node(usize),
    Edge(usize),
}

/// Index-level incidence structure, the canonical order for aggregation.
#[derive(Clone, Debug)]
pub struct Incidence {
    /// Per edge: incident node indices, in declared incidence order.
    pub edge_nodes: Vec<Vec<usize>>,
    /// Per node: incident edge indices, sorted by edge id.
    pub node_edges: Vec<Vec<usize>>,
}

impl GraphSchema {
    pub fn label_dim(&self) -> usize {
        self.task.labels.len()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn edge_index(&self, id: &str) -> Option<usize> {
        self.edges.iter().position(|e| e.id == id)
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.task.labels.iter().position(|l| l == name)
    }

    /// For each label column, the element bound to it (columns are checked
    /// by [`validate_schema`] to be bound exactly once).
    pub fn column_elements(&self) -> Vec<Option<ElementRef>> {
        let mut cols = vec![None; self.label_dim()];
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(c) = n.label {
                if c < cols.len() {
                    cols[c] = Some(ElementRef::Node(i));
                }
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            if let Some(c) = e.label {
                if c < cols.len() {
                    cols[c] = Some(ElementRef::Edge(i));
                }
            }
        }
        cols
    }

    /// Index-level incidence maps; node->edge lists sorted by edge id.
    pub fn incidence_index(&self) -> Incidence {
        let node_pos: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let edge_nodes: Vec<Vec<usize>> = self
            .edges
            .iter()
            .map(|e| {
                e.nodes
                    .iter()
                    .filter_map(|id| node_pos.get(id.as_str()).copied())
                    .collect()
            })
            .collect();
        let mut node_edges: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        let mut edge_order: Vec<usize> = (0..self.edges.len()).collect();
        edge_order.sort_by(|&a, &b| self.edges[a].id.cmp(&self.edges[b].id));
        for &ei in &edge_order {
            for id in &self.edges[ei].nodes {
                if let Some(&ni) = node_pos.get(id.as_str()) {
                    if !node_edges[ni].contains(&ei) {
                        node_edges[ni].push(ei);
                    }
                }
            }
        }
        Incidence {
            edge_nodes,
            node_edges,
        }
    }

    /// Canonical content hash used to pin checkpoints to a schema.
    pub fn content_hash(&self) -> String {
        let text = toml::to_string(self).expect("schema serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_toml(text: &str) -> Result<GraphSchema> {
        toml::from_str(text).map_err(|e| Error::Config(format!("schema parse: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<GraphSchema> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }
}

/// Id-keyed incidence maps, the public form of [`GraphSchema::incidence_index`].
pub fn incidence(
    schema: &GraphSchema,
) -> (BTreeMap<String, Vec<String>>, BTreeMap<String, Vec<String>>) {
    let idx = schema.incidence_index();
    let edge_map = schema
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let nodes = idx.edge_nodes[i]
                .iter()
                .map(|&n| schema.nodes[n].id.clone())
                .collect();
            (e.id.clone(), nodes)
        })
        .collect();
    let node_map = schema
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let edges = idx.node_edges[i]
                .iter()
                .map(|&e| schema.edges[e].id.clone())
                .collect();
            (n.id.clone(), edges)
        })
        .collect();
    (edge_map, node_map)
}

/// A broken schema rule, named after the offending element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub element: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element, self.rule)
    }
}

/// Checks every schema invariant; an empty list means the schema is valid.
pub fn validate_schema(schema: &GraphSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen_nodes = HashSet::new();
    for n in &schema.nodes {
        if !seen_nodes.insert(n.id.as_str()) {
            out.push(Violation {
                element: n.id.clone(),
                rule: "duplicate node id".into(),
            });
        }
        if matches!(n.kind, NodeKind::Criterion | NodeKind::Composite)
            && !schema.task.id.is_cvs_related()
        {
            out.push(Violation {
                element: n.id.clone(),
                rule: "criterion/composite nodes only appear in CVS-related schemas".into(),
            });
        }
    }
    let mut seen_edges = HashSet::new();
    for e in &schema.edges {
        if !seen_edges.insert(e.id.as_str()) {
            out.push(Violation {
                element: e.id.clone(),
                rule: "duplicate edge id".into(),
            });
        }
        if e.nodes.len() < 2 {
            out.push(Violation {
                element: e.id.clone(),
                rule: format!("edge arity {} is below the minimum of 2", e.nodes.len()),
            });
        }
        let mut in_edge = HashSet::new();
        for nid in &e.nodes {
            if !seen_nodes.contains(nid.as_str()) {
                out.push(Violation {
                    element: e.id.clone(),
                    rule: format!("references unknown node \"{nid}\""),
                });
            }
            if !in_edge.insert(nid.as_str()) {
                out.push(Violation {
                    element: e.id.clone(),
                    rule: format!("node \"{nid}\" listed twice in incidence"),
                });
            }
        }
    }

    // Label bindings: in range, and each column bound exactly once.
    let dim = schema.label_dim();
    let mut bound: Vec<Vec<String>> = vec![Vec::new(); dim];
    let mut check_binding = |element: &str, col: Option<usize>, out: &mut Vec<Violation>| {
        if let Some(c) = col {
            if c >= dim {
                out.push(Violation {
                    element: element.to_string(),
                    rule: format!("label binding {c} outside vocabulary of size {dim}"),
                });
            } else {
                bound[c].push(element.to_string());
            }
        }
    };
    for n in &schema.nodes {
        check_binding(&n.id, n.label, &mut out);
    }
    for e in &schema.edges {
        check_binding(&e.id, e.label, &mut out);
    }
    for (c, owners) in bound.iter().enumerate() {
        if owners.is_empty() {
            out.push(Violation {
                element: schema.task.labels[c].clone(),
                rule: format!("label column {c} is bound to no element"),
            });
        } else if owners.len() > 1 {
            out.push(Violation {
                element: schema.task.labels[c].clone(),
                rule: format!("label column {c} bound to multiple elements: {owners:?}"),
            });
        }
    }

    // Dangling nodes are rejected for CVS/clipping schemas.
    if schema.task.id.requires_connected_nodes() {
        let mut connected: HashSet<&str> = HashSet::new();
        for e in &schema.edges {
            for nid in &e.nodes {
                connected.insert(nid.as_str());
            }
        }
        for n in &schema.nodes {
            if !connected.contains(n.id.as_str()) {
                out.push(Violation {
                    element: n.id.clone(),
                    rule: "dangling node: not incident to any edge".into(),
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Canonical vocabularies and task schemas
// ---------------------------------------------------------------------------

pub const TOOLS: [&str; 6] = [
    "grasper",
    "bipolar",
    "hook",
    "scissors",
    "clipper",
    "irrigator",
];

pub const VERBS: [&str; 10] = [
    "grasp",
    "retract",
    "dissect",
    "coagulate",
    "clip",
    "cut",
    "aspirate",
    "irrigate",
    "pack",
    "null_verb",
];

pub const TARGETS: [&str; 15] = [
    "gallbladder",
    "cystic_plate",
    "cystic_duct",
    "cystic_artery",
    "cystic_pedicle",
    "blood_vessel",
    "fluid",
    "abdominal_wall_cavity",
    "liver",
    "adhesion",
    "omentum",
    "peritoneum",
    "gut",
    "specimen_bag",
    "null_target",
];

pub const CVS_CRITERIA: [&str; 3] = [
    "cvs_two_structures",
    "cvs_cystic_plate",
    "cvs_hepatocystic_triangle",
];

pub const CVS_ACHIEVED: &str = "cvs_achieved";

/// The adapter's action-triplet class table: `(tool, verb, target)` names,
/// one row per triplet class, in canonical (label column) order.
pub const TRIPLET_CLASSES: [(&str, &str, &str); 100] = [
    // grasper
    ("grasper", "dissect", "cystic_plate"),
    ("grasper", "dissect", "gallbladder"),
    ("grasper", "dissect", "omentum"),
    ("grasper", "grasp", "cystic_artery"),
    ("grasper", "grasp", "cystic_duct"),
    ("grasper", "grasp", "cystic_pedicle"),
    ("grasper", "grasp", "cystic_plate"),
    ("grasper", "grasp", "gallbladder"),
    ("grasper", "grasp", "gut"),
    ("grasper", "grasp", "liver"),
    ("grasper", "grasp", "omentum"),
    ("grasper", "grasp", "peritoneum"),
    ("grasper", "grasp", "specimen_bag"),
    ("grasper", "pack", "gallbladder"),
    ("grasper", "retract", "cystic_duct"),
    ("grasper", "retract", "cystic_pedicle"),
    ("grasper", "retract", "cystic_plate"),
    ("grasper", "retract", "gallbladder"),
    ("grasper", "retract", "gut"),
    ("grasper", "retract", "liver"),
    ("grasper", "retract", "omentum"),
    ("grasper", "retract", "peritoneum"),
    ("grasper", "retract", "specimen_bag"),
    ("grasper", "null_verb", "null_target"),
    // bipolar
    ("bipolar", "coagulate", "abdominal_wall_cavity"),
    ("bipolar", "coagulate", "blood_vessel"),
    ("bipolar", "coagulate", "cystic_artery"),
    ("bipolar", "coagulate", "cystic_duct"),
    ("bipolar", "coagulate", "cystic_pedicle"),
    ("bipolar", "coagulate", "cystic_plate"),
    ("bipolar", "coagulate", "gallbladder"),
    ("bipolar", "coagulate", "liver"),
    ("bipolar", "coagulate", "omentum"),
    ("bipolar", "coagulate", "peritoneum"),
    ("bipolar", "dissect", "adhesion"),
    ("bipolar", "dissect", "cystic_artery"),
    ("bipolar", "dissect", "cystic_duct"),
    ("bipolar", "dissect", "cystic_plate"),
    ("bipolar", "dissect", "gallbladder"),
    ("bipolar", "dissect", "omentum"),
    ("bipolar", "retract", "liver"),
    ("bipolar", "null_verb", "null_target"),
    // hook
    ("hook", "coagulate", "blood_vessel"),
    ("hook", "coagulate", "cystic_artery"),
    ("hook", "coagulate", "cystic_duct"),
    ("hook", "coagulate", "cystic_pedicle"),
    ("hook", "coagulate", "cystic_plate"),
    ("hook", "coagulate", "gallbladder"),
    ("hook", "coagulate", "liver"),
    ("hook", "coagulate", "omentum"),
    ("hook", "cut", "blood_vessel"),
    ("hook", "cut", "peritoneum"),
    ("hook", "dissect", "adhesion"),
    ("hook", "dissect", "blood_vessel"),
    ("hook", "dissect", "cystic_artery"),
    ("hook", "dissect", "cystic_duct"),
    ("hook", "dissect", "cystic_plate"),
    ("hook", "dissect", "gallbladder"),
    ("hook", "dissect", "omentum"),
    ("hook", "dissect", "peritoneum"),
    ("hook", "retract", "gallbladder"),
    ("hook", "retract", "liver"),
    ("hook", "null_verb", "null_target"),
    // scissors
    ("scissors", "coagulate", "omentum"),
    ("scissors", "cut", "adhesion"),
    ("scissors", "cut", "blood_vessel"),
    ("scissors", "cut", "cystic_artery"),
    ("scissors", "cut", "cystic_duct"),
    ("scissors", "cut", "cystic_plate"),
    ("scissors", "cut", "liver"),
    ("scissors", "cut", "omentum"),
    ("scissors", "cut", "peritoneum"),
    ("scissors", "dissect", "cystic_plate"),
    ("scissors", "dissect", "gallbladder"),
    ("scissors", "dissect", "omentum"),
    ("scissors", "null_verb", "null_target"),
    // clipper
    ("clipper", "clip", "blood_vessel"),
    ("clipper", "clip", "cystic_artery"),
    ("clipper", "clip", "cystic_duct"),
    ("clipper", "clip", "cystic_pedicle"),
    ("clipper", "clip", "cystic_plate"),
    ("clipper", "null_verb", "null_target"),
    // irrigator
    ("irrigator", "aspirate", "blood_vessel"),
    ("irrigator", "aspirate", "fluid"),
    ("irrigator", "dissect", "cystic_duct"),
    ("irrigator", "dissect", "cystic_pedicle"),
    ("irrigator", "dissect", "cystic_plate"),
    ("irrigator", "dissect", "gallbladder"),
    ("irrigator", "dissect", "omentum"),
    ("irrigator", "dissect", "peritoneum"),
    ("irrigator", "irrigate", "abdominal_wall_cavity"),
    ("irrigator", "irrigate", "cystic_pedicle"),
    ("irrigator", "irrigate", "liver"),
    ("irrigator", "irrigate", "omentum"),
    ("irrigator", "retract", "gallbladder"),
    ("irrigator", "retract", "gut"),
    ("irrigator", "retract", "liver"),
    ("irrigator", "retract", "omentum"),
    ("irrigator", "retract", "peritoneum"),
    ("irrigator", "null_verb", "null_target"),
];

pub fn triplet_label(tool: &str, verb: &str, target: &str) -> String {
    format!("{tool}.{verb}.{target}")
}

/// Label vocabulary of the action-triplet task: tools, verbs, targets, then
/// one column per triplet class.
pub fn triplet_vocabulary() -> Vec<String> {
    let mut v: Vec<String> = TOOLS.iter().map(|s| s.to_string()).collect();
    v.extend(VERBS.iter().map(|s| s.to_string()));
    v.extend(TARGETS.iter().map(|s| s.to_string()));
    v.extend(
        TRIPLET_CLASSES
            .iter()
            .map(|(t, a, o)| triplet_label(t, a, o)),
    );
    v
}

pub fn cvs_vocabulary() -> Vec<String> {
    let mut v: Vec<String> = CVS_CRITERIA.iter().map(|s| s.to_string()).collect();
    v.push(CVS_ACHIEVED.to_string());
    v
}

pub fn clipping_vocabulary() -> Vec<String> {
    vec![
        "clipper".into(),
        "clip".into(),
        "cystic_duct".into(),
        "cystic_artery".into(),
        triplet_label("clipper", "clip", "cystic_duct"),
        triplet_label("clipper", "clip", "cystic_artery"),
    ]
}

pub fn clipping_with_prior_vocabulary() -> Vec<String> {
    let mut v = vec![
        "clipper".to_string(),
        "clip".into(),
        "cystic_duct".into(),
        "cystic_artery".into(),
    ];
    v.extend(cvs_vocabulary());
    v.push(triplet_label("clipper", "clip", "cystic_duct"));
    v.push(triplet_label("clipper", "clip", "cystic_artery"));
    v
}

const DEFAULT_PAST_WINDOW: usize = 4;
const DEFAULT_HORIZON: usize = 4;

fn node(id: &str, kind: NodeKind, label: Option<usize>) -> ConceptNode {
    ConceptNode {
        id: id.to_string(),
        kind,
        label,
    }
}

/// Builds the canonical schema for one of the known tasks. Deterministic:
/// the same task always yields an identical schema, including ordering.
pub fn build_task_schema(task: &TaskId) -> Result<GraphSchema> {
    let schema = match task {
        TaskId::Triplet => build_triplet_schema(),
        TaskId::Cvs => build_cvs_schema(),
        TaskId::Clipping => build_clipping_schema(false),
        TaskId::ClippingWithCvsPrior => build_clipping_schema(true),
        TaskId::Custom(name) => {
            return Err(Error::Config(format!(
                "unknown task \"{name}\": canonical schemas exist only for \
                 triplet, cvs, clipping, clipping_with_cvs_prior; \
                 load custom tasks from a schema file"
            )))
        }
    };
    debug_assert!(validate_schema(&schema).is_empty());
    Ok(schema)
}

fn build_triplet_schema() -> GraphSchema {
    let labels = triplet_vocabulary();
    let mut nodes = Vec::new();
    for (i, t) in TOOLS.iter().enumerate() {
        nodes.push(node(t, NodeKind::Tool, Some(i)));
    }
    for (i, v) in VERBS.iter().enumerate() {
        nodes.push(node(v, NodeKind::Action, Some(TOOLS.len() + i)));
    }
    for (i, t) in TARGETS.iter().enumerate() {
        nodes.push(node(t, NodeKind::Target, Some(TOOLS.len() + VERBS.len() + i)));
    }
    let comp_count = TOOLS.len() + VERBS.len() + TARGETS.len();
    let edges = TRIPLET_CLASSES
        .iter()
        .enumerate()
        .map(|(i, (tool, verb, target))| HyperEdge {
            id: triplet_label(tool, verb, target),
            nodes: vec![tool.to_string(), verb.to_string(), target.to_string()],
            label: Some(comp_count + i),
        })
        .collect();
    GraphSchema {
        version: 1,
        task: TaskSpec {
            id: TaskId::Triplet,
            past_window: DEFAULT_PAST_WINDOW,
            horizon: DEFAULT_HORIZON,
            labels,
        },
        nodes,
        edges,
    }
}

fn build_cvs_schema() -> GraphSchema {
    let labels = cvs_vocabulary();
    let nodes = CVS_CRITERIA
        .iter()
        .enumerate()
        .map(|(i, c)| node(c, NodeKind::Criterion, Some(i)))
        .collect();
    let edges = vec![HyperEdge {
        id: "cvs".into(),
        nodes: CVS_CRITERIA.iter().map(|s| s.to_string()).collect(),
        label: Some(3),
    }];
    GraphSchema {
        version: 1,
        task: TaskSpec {
            id: TaskId::Cvs,
            past_window: DEFAULT_PAST_WINDOW,
            horizon: DEFAULT_HORIZON,
            labels,
        },
        nodes,
        edges,
    }
}

fn build_clipping_schema(with_prior: bool) -> GraphSchema {
    let labels = if with_prior {
        clipping_with_prior_vocabulary()
    } else {
        clipping_vocabulary()
    };
    let mut nodes = vec![
        node("clipper", NodeKind::Tool, Some(0)),
        node("clip", NodeKind::Action, Some(1)),
        node("cystic_duct", NodeKind::Target, Some(2)),
        node("cystic_artery", NodeKind::Target, Some(3)),
    ];
    let mut edges = Vec::new();
    if with_prior {
        for (i, c) in CVS_CRITERIA.iter().enumerate() {
            nodes.push(node(c, NodeKind::Criterion, Some(4 + i)));
        }
        nodes.push(node("cvs", NodeKind::Composite, Some(7)));
        // Structural edge keeping the CVS cluster connected; carries no label
        // of its own (the composite node binds the achieved column).
        edges.push(HyperEdge {
            id: "cvs_context".into(),
            nodes: vec![
                "cvs".into(),
                CVS_CRITERIA[0].into(),
                CVS_CRITERIA[1].into(),
                CVS_CRITERIA[2].into(),
            ],
            label: None,
        });
    }
    let triplet_base = if with_prior { 8 } else { 4 };
    edges.push(HyperEdge {
        id: triplet_label("clipper", "clip", "cystic_duct"),
        nodes: vec!["clipper".into(), "clip".into(), "cystic_duct".into()],
        label: Some(triplet_base),
    });
    edges.push(HyperEdge {
        id: triplet_label("clipper", "clip", "cystic_artery"),
        nodes: vec!["clipper".into(), "clip".into(), "cystic_artery".into()],
        label: Some(triplet_base + 1),
    });
    GraphSchema {
        version: 1,
        task: TaskSpec {
            id: if with_prior {
                TaskId::ClippingWithCvsPrior
            } else {
                TaskId::Clipping
            },
            past_window: DEFAULT_PAST_WINDOW,
            horizon: DEFAULT_HORIZON,
            labels,
        },
        nodes,
        edges,
    }
}
