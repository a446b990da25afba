//! Plan-tree representation and the portable plan JSON format.
//!
//! Portable schema, one object per node:
//!
//! ```json
//! {"plan_id": "q1-p0", "op": "HashJoin", "rows": 1200.0, "cost": 5300.5,
//!  "tables": [], "children": [{"op": "SeqScan", ...}, {"op": "SeqScan", ...}]}
//! ```
//!
//! `plan_id` appears on the root only. PostgreSQL `EXPLAIN (FORMAT JSON)`
//! output is also accepted and mapped onto the same operator vocabulary.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Closed physical-operator vocabulary; [`OperatorKind::Other`] catches the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatorKind {
    SeqScan,
    IndexScan,
    HashJoin,
    MergeJoin,
    NestedLoop,
    Sort,
    Aggregate,
    Materialize,
    Other,
}

impl OperatorKind {
    pub const COUNT: usize = 9;

    pub const ALL: [OperatorKind; Self::COUNT] = [
        OperatorKind::SeqScan,
        OperatorKind::IndexScan,
        OperatorKind::HashJoin,
        OperatorKind::MergeJoin,
        OperatorKind::NestedLoop,
        OperatorKind::Sort,
        OperatorKind::Aggregate,
        OperatorKind::Materialize,
        OperatorKind::Other,
    ];

    pub const JOINS: [OperatorKind; 3] = [
        OperatorKind::HashJoin,
        OperatorKind::MergeJoin,
        OperatorKind::NestedLoop,
    ];

    /// Position in the one-hot encoding.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_join(self) -> bool {
        matches!(
            self,
            OperatorKind::HashJoin | OperatorKind::MergeJoin | OperatorKind::NestedLoop
        )
    }

    pub fn is_scan(self) -> bool {
        matches!(self, OperatorKind::SeqScan | OperatorKind::IndexScan)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::SeqScan => "SeqScan",
            OperatorKind::IndexScan => "IndexScan",
            OperatorKind::HashJoin => "HashJoin",
            OperatorKind::MergeJoin => "MergeJoin",
            OperatorKind::NestedLoop => "NestedLoop",
            OperatorKind::Sort => "Sort",
            OperatorKind::Aggregate => "Aggregate",
            OperatorKind::Materialize => "Materialize",
            OperatorKind::Other => "Other",
        }
    }

    /// Portable-schema name; unknown names map to `Other`.
    pub fn from_portable(name: &str) -> OperatorKind {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == name)
            .unwrap_or(OperatorKind::Other)
    }

    /// PostgreSQL `Node Type` name.
    pub fn from_postgres(node_type: &str) -> OperatorKind {
        match node_type {
            "Seq Scan" | "Parallel Seq Scan" => OperatorKind::SeqScan,
            "Index Scan" | "Index Only Scan" | "Bitmap Heap Scan" => OperatorKind::IndexScan,
            "Hash Join" => OperatorKind::HashJoin,
            "Merge Join" => OperatorKind::MergeJoin,
            "Nested Loop" => OperatorKind::NestedLoop,
            "Sort" | "Incremental Sort" => OperatorKind::Sort,
            "Aggregate" | "GroupAggregate" | "HashAggregate" => OperatorKind::Aggregate,
            "Materialize" => OperatorKind::Materialize,
            _ => OperatorKind::Other,
        }
    }
}

impl std::fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    pub operator: OperatorKind,
    /// Estimated output rows.
    pub est_cardinality: f64,
    /// Estimated cost, cumulative over the subtree.
    pub est_cost: f64,
    pub table_ids: Vec<String>,
    pub children: Vec<PlanNode>,
}

impl PlanNode {
    pub fn leaf(operator: OperatorKind, rows: f64, cost: f64, tables: &[&str]) -> PlanNode {
        PlanNode {
            operator,
            est_cardinality: rows,
            est_cost: cost,
            table_ids: tables.iter().map(|t| t.to_string()).collect(),
            children: Vec::new(),
        }
    }

    pub fn with_children(
        operator: OperatorKind,
        rows: f64,
        cost: f64,
        children: Vec<PlanNode>,
    ) -> PlanNode {
        PlanNode {
            operator,
            est_cardinality: rows,
            est_cost: cost,
            table_ids: Vec::new(),
            children,
        }
    }

    pub fn count(&self) -> usize {
        1 + self.children.iter().map(PlanNode::count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(PlanNode::depth).max().unwrap_or(0)
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a PlanNode)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }
}

/// A rooted operator tree; the unit being ranked.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanTree {
    plan_id: String,
    root: PlanNode,
    node_count: usize,
}

impl PlanTree {
    /// Builds and validates a tree.
    pub fn new(plan_id: impl Into<String>, root: PlanNode) -> Result<PlanTree> {
        let tree = PlanTree::new_unchecked(plan_id, root);
        match validate_tree(&tree).into_iter().next() {
            None => Ok(tree),
            Some(v) => Err(v.into_error()),
        }
    }

    /// Builds a tree without validation, for constructing invalid inputs to
    /// [`validate_tree`].
    pub fn new_unchecked(plan_id: impl Into<String>, root: PlanNode) -> PlanTree {
        let node_count = root.count();
        PlanTree {
            plan_id: plan_id.into(),
            root,
            node_count,
        }
    }

    pub fn plan_id(&self) -> &str {
        &self.plan_id
    }

    pub fn set_plan_id(&mut self, id: impl Into<String>) {
        self.plan_id = id.into();
    }

    pub fn root(&self) -> &PlanNode {
        &self.root
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Same operators, estimates, tables and shape; ignores `plan_id`.
    pub fn structurally_eq(&self, other: &PlanTree) -> bool {
        self.root == other.root
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Structural,
    Range,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Child-index path from the root, e.g. `root.1.0`.
    pub path: String,
    pub detail: String,
}

impl Violation {
    fn into_error(self) -> Error {
        match self.kind {
            ViolationKind::Structural => Error::StructuralError {
                path: self.path,
                detail: self.detail,
            },
            ViolationKind::Range => Error::RangeError {
                path: self.path,
                detail: self.detail,
            },
        }
    }
}

/// Lists every invariant violation; empty iff the tree is valid.
pub fn validate_tree(plan: &PlanTree) -> Vec<Violation> {
    fn walk(node: &PlanNode, path: &str, out: &mut Vec<Violation>) {
        let range = |field: &str, v: f64| {
            (!v.is_finite() || v < 0.0).then(|| Violation {
                kind: ViolationKind::Range,
                path: path.to_string(),
                detail: format!("{field} = {v} must be finite and >= 0"),
            })
        };
        out.extend(range("est_cardinality", node.est_cardinality));
        out.extend(range("est_cost", node.est_cost));

        let n = node.children.len();
        let arity_problem = if node.operator.is_join() && n != 2 {
            Some(format!("{} needs exactly 2 children, has {n}", node.operator))
        } else if node.operator.is_scan() && n != 0 {
            Some(format!("{} must be a leaf, has {n} children", node.operator))
        } else if n > 2 {
            Some(format!("{} has {n} children; arity is limited to 2", node.operator))
        } else {
            None
        };
        if let Some(detail) = arity_problem {
            out.push(Violation {
                kind: ViolationKind::Structural,
                path: path.to_string(),
                detail,
            });
        }
        for (i, c) in node.children.iter().enumerate() {
            walk(c, &format!("{path}.{i}"), out);
        }
    }

    let mut out = Vec::new();
    walk(&plan.root, "root", &mut out);
    let actual = plan.root.count();
    if actual != plan.node_count {
        out.push(Violation {
            kind: ViolationKind::Structural,
            path: "root".into(),
            detail: format!("node_count {} but {actual} nodes reachable", plan.node_count),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPlan {
    pub plan: PlanTree,
    pub warnings: Vec<ParseWarning>,
}

const DEFAULT_PLAN_ID: &str = "plan";

/// Parses a portable plan document or a PostgreSQL EXPLAIN JSON document.
pub fn parse_plan(text: &str) -> Result<ParsedPlan> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    parse_plan_value(&value)
}

/// As [`parse_plan`], from an already-decoded JSON value.
pub fn parse_plan_value(value: &Value) -> Result<ParsedPlan> {
    let mut warnings = Vec::new();
    let (id, root) = match value {
        Value::Array(items) => {
            let first = items
                .first()
                .and_then(Value::as_object)
                .ok_or_else(|| Error::MalformedDocument("empty EXPLAIN array".into()))?;
            parse_postgres_doc(first, &mut warnings)?
        }
        Value::Object(obj) if obj.contains_key("Plan") => parse_postgres_doc(obj, &mut warnings)?,
        Value::Object(obj) if obj.contains_key("op") => {
            let id = match obj.get("plan_id") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => {
                    warnings.push(ParseWarning {
                        path: "root".into(),
                        message: format!("missing plan_id; using `{DEFAULT_PLAN_ID}`"),
                    });
                    DEFAULT_PLAN_ID.to_string()
                }
            };
            (id, parse_portable_node(obj, "root", &mut warnings)?)
        }
        _ => {
            return Err(Error::MalformedDocument(
                "expected a portable plan object or an EXPLAIN document".into(),
            ))
        }
    };
    let plan = PlanTree::new(id, root)?;
    Ok(ParsedPlan { plan, warnings })
}

fn number_field(
    obj: &Map<String, Value>,
    key: &str,
    path: &str,
    warnings: &mut Vec<ParseWarning>,
) -> Result<f64> {
    match obj.get(key) {
        Some(Value::Number(n)) => n.as_f64().ok_or_else(|| Error::RangeError {
            path: path.to_string(),
            detail: format!("`{key}` is not representable"),
        }),
        None | Some(Value::Null) => {
            warnings.push(ParseWarning {
                path: path.to_string(),
                message: format!("missing `{key}`; defaulting to 0"),
            });
            Ok(0.0)
        }
        Some(other) => Err(Error::MalformedDocument(format!(
            "{path}: `{key}` must be a number, got {other}"
        ))),
    }
}

fn parse_portable_node(
    obj: &Map<String, Value>,
    path: &str,
    warnings: &mut Vec<ParseWarning>,
) -> Result<PlanNode> {
    let op_name = obj
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedDocument(format!("{path}: missing string `op`")))?;
    let operator = OperatorKind::from_portable(op_name);
    if operator == OperatorKind::Other && op_name != "Other" {
        warnings.push(ParseWarning {
            path: path.to_string(),
            message: format!("unknown operator `{op_name}` mapped to Other"),
        });
    }
    let est_cardinality = number_field(obj, "rows", path, warnings)?;
    let est_cost = number_field(obj, "cost", path, warnings)?;
    let table_ids = match obj.get("tables") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|t| match t {
                Value::String(s) => Ok(s.clone()),
                other => Err(Error::MalformedDocument(format!(
                    "{path}: table id must be a string, got {other}"
                ))),
            })
            .collect::<Result<_>>()?,
        Some(other) => {
            return Err(Error::MalformedDocument(format!(
                "{path}: `tables` must be an array, got {other}"
            )))
        }
    };
    let children = match obj.get("children") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let child_path = format!("{path}.{i}");
                let cobj = c.as_object().ok_or_else(|| {
                    Error::MalformedDocument(format!("{child_path}: child must be an object"))
                })?;
                parse_portable_node(cobj, &child_path, warnings)
            })
            .collect::<Result<_>>()?,
        Some(other) => {
            return Err(Error::MalformedDocument(format!(
                "{path}: `children` must be an array, got {other}"
            )))
        }
    };
    Ok(PlanNode {
        operator,
        est_cardinality,
        est_cost,
        table_ids,
        children,
    })
}

fn parse_postgres_doc(
    doc: &Map<String, Value>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<(String, PlanNode)> {
    let plan = doc
        .get("Plan")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::MalformedDocument("EXPLAIN document without `Plan`".into()))?;
    let id = doc
        .get("plan_id")
        .and_then(Value::as_str)
        .unwrap_or(DEFAULT_PLAN_ID)
        .to_string();
    Ok((id, parse_postgres_node(plan, "root", warnings)?))
}

fn parse_postgres_node(
    obj: &Map<String, Value>,
    path: &str,
    warnings: &mut Vec<ParseWarning>,
) -> Result<PlanNode> {
    let node_type = obj
        .get("Node Type")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedDocument(format!("{path}: missing `Node Type`")))?;
    let operator = OperatorKind::from_postgres(node_type);
    let est_cardinality = number_field(obj, "Plan Rows", path, warnings)?;
    let est_cost = number_field(obj, "Total Cost", path, warnings)?;
    let table_ids = obj
        .get("Relation Name")
        .and_then(Value::as_str)
        .map(|s| vec![s.to_string()])
        .unwrap_or_default();
    let mut children: Vec<PlanNode> = match obj.get("Plans") {
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let child_path = format!("{path}.{i}");
                let cobj = c.as_object().ok_or_else(|| {
                    Error::MalformedDocument(format!("{child_path}: plan must be an object"))
                })?;
                parse_postgres_node(cobj, &child_path, warnings)
            })
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    // Bitmap index probes and init-plans hang below scans; they are part of
    // the access path, not separate inputs.
    if operator.is_scan() && !children.is_empty() {
        warnings.push(ParseWarning {
            path: path.to_string(),
            message: format!("dropped {} sub-plan(s) under `{node_type}`", children.len()),
        });
        children.clear();
    }
    Ok(PlanNode {
        operator,
        est_cardinality,
        est_cost,
        table_ids,
        children,
    })
}

#[derive(Serialize)]
struct PortableNode<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    plan_id: Option<&'a str>,
    op: &'static str,
    rows: f64,
    cost: f64,
    tables: &'a [String],
    children: Vec<PortableNode<'a>>,
}

fn to_portable<'a>(node: &'a PlanNode, plan_id: Option<&'a str>) -> PortableNode<'a> {
    PortableNode {
        plan_id,
        op: node.operator.as_str(),
        rows: node.est_cardinality,
        cost: node.est_cost,
        tables: &node.table_ids,
        children: node.children.iter().map(|c| to_portable(c, None)).collect(),
    }
}

/// Canonical portable JSON value: fixed key order, children in stored order.
pub fn plan_to_value(plan: &PlanTree) -> Value {
    serde_json::to_value(to_portable(&plan.root, Some(&plan.plan_id)))
        .expect("plan nodes serialize")
}

/// Canonical portable JSON text; the inverse of [`parse_plan`] on valid trees.
pub fn serialize_plan(plan: &PlanTree) -> String {
    serde_json::to_string(&to_portable(&plan.root, Some(&plan.plan_id))).expect("plan nodes serialize")
}
