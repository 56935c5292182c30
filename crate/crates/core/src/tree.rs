//! Semantic class hierarchy.
//!
//! Nodes are indexed in order of first appearance in the edge list and that
//! index doubles as the class id used by every tree-aware operation.
//! Depth is 1 at a root and grows by one per level.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::{ClassRemap, LabelVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassNode {
    pub id: String,
    pub name: String,
    pub lemmas: Vec<String>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SemanticTree {
    nodes: Vec<ClassNode>,
    roots: Vec<usize>,
    depth: Vec<u32>,
    index: HashMap<String, usize>,
    dropped_parents: Vec<(String, String)>,
}

struct RawEdge {
    id: String,
    parent: Option<String>,
    name: String,
    lemmas: Vec<String>,
}

impl SemanticTree {
    /// Parses the TSV edge list `child<TAB>parent<TAB>name<TAB>lemma1|lemma2`.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 {
                return Err(Error::Parse(format!(
                    "tree line {}: expected at least 2 tab-separated columns",
                    lineno + 1
                )));
            }
            let id = cols[0].trim().to_owned();
            if id.is_empty() {
                return Err(Error::Parse(format!("tree line {}: empty id", lineno + 1)));
            }
            let parent = Some(cols[1].trim()).filter(|p| !p.is_empty()).map(str::to_owned);
            let name = cols
                .get(2)
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| id.clone());
            let mut lemmas: Vec<String> = cols
                .get(3)
                .map(|s| {
                    s.split('|')
                        .map(|l| l.trim().to_owned())
                        .filter(|l| !l.is_empty())
                        .collect()
                })
                .unwrap_or_default();
            if lemmas.is_empty() {
                lemmas.push(name.clone());
            }
            edges.push(RawEdge {
                id,
                parent,
                name,
                lemmas,
            });
        }
        Self::build(edges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }

    /// Builds a tree from `(child, parent)` pairs; names and lemmas default to the id.
    pub fn from_edges(edges: &[(&str, Option<&str>)]) -> Result<Self> {
        Self::build(
            edges
                .iter()
                .map(|(c, p)| RawEdge {
                    id: (*c).to_owned(),
                    parent: p.map(str::to_owned),
                    name: (*c).to_owned(),
                    lemmas: vec![(*c).to_owned()],
                })
                .collect(),
        )
    }

    fn build(edges: Vec<RawEdge>) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut nodes: Vec<ClassNode> = Vec::new();
        let mut parent_names: Vec<Option<String>> = Vec::new();
        let mut dropped_parents = Vec::new();
        for e in edges {
            if let Some(&existing) = index.get(&e.id) {
                if parent_names[existing] == e.parent {
                    return Err(Error::DuplicateId(e.id));
                }
                // Additional hypernym path: keep the first-listed parent.
                log::warn!(
                    "node {} lists extra parent {:?}; keeping {:?}",
                    e.id,
                    e.parent,
                    parent_names[existing]
                );
                dropped_parents.push((e.id, e.parent.unwrap_or_default()));
                continue;
            }
            index.insert(e.id.clone(), nodes.len());
            parent_names.push(e.parent);
            nodes.push(ClassNode {
                id: e.id,
                name: e.name,
                lemmas: e.lemmas,
                parent: None,
                children: Vec::new(),
            });
        }
        for i in 0..nodes.len() {
            if let Some(p) = &parent_names[i] {
                let &pi = index.get(p).ok_or_else(|| Error::DanglingParent {
                    child: nodes[i].id.clone(),
                    parent: p.clone(),
                })?;
                nodes[i].parent = Some(pi);
                nodes[pi].children.push(i);
            }
        }
        let roots: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].parent.is_none()).collect();

        let mut depth = vec![0u32; nodes.len()];
        let mut stack: Vec<usize> = roots.clone();
        for &r in &roots {
            depth[r] = 1;
        }
        while let Some(n) = stack.pop() {
            for &c in &nodes[n].children {
                depth[c] = depth[n] + 1;
                stack.push(c);
            }
        }
        if let Some(bad) = depth.iter().position(|&d| d == 0) {
            // Unreachable from any root: walk up until a node repeats.
            let mut seen = BTreeSet::new();
            let mut cur = bad;
            while seen.insert(cur) {
                cur = nodes[cur].parent.expect("non-root has a parent");
            }
            return Err(Error::CycleDetected(nodes[cur].id.clone()));
        }
        Ok(SemanticTree {
            nodes,
            roots,
            depth,
            index,
            dropped_parents,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ClassNode] {
        &self.nodes
    }

    pub fn node(&self, class: usize) -> &ClassNode {
        &self.nodes[class]
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// `(child, dropped parent)` pairs discarded while resolving multiple hypernyms.
    pub fn dropped_parents(&self) -> &[(String, String)] {
        &self.dropped_parents
    }

    pub fn depth(&self, class: usize) -> u32 {
        self.depth[class]
    }

    pub fn max_depth(&self) -> u32 {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn parent(&self, class: usize) -> Option<usize> {
        self.nodes[class].parent
    }

    pub fn children(&self, class: usize) -> &[usize] {
        &self.nodes[class].children
    }

    pub fn is_leaf(&self, class: usize) -> bool {
        self.nodes[class].children.is_empty()
    }

    fn check(&self, class: usize) -> Result<()> {
        if class < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownClass(class))
        }
    }

    /// Ancestors from the parent up to the root, preceded by `class` itself
    /// when `include_self` is set.
    pub fn ancestor_set(&self, class: usize, include_self: bool) -> Result<Vec<usize>> {
        self.check(class)?;
        let mut out = Vec::with_capacity(self.depth[class] as usize);
        if include_self {
            out.push(class);
        }
        let mut cur = self.nodes[class].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        Ok(out)
    }

    /// The unique ancestor-or-self of `class` at depth `d` (requires `d <= depth(class)`).
    pub fn ancestor_at_depth(&self, class: usize, d: u32) -> usize {
        debug_assert!(d >= 1 && d <= self.depth[class]);
        let mut cur = class;
        while self.depth[cur] > d {
            cur = self.nodes[cur].parent.expect("depth > 1 implies a parent");
        }
        cur
    }

    pub fn is_descendant_or_self(&self, class: usize, ancestor: usize) -> bool {
        if self.depth[class] < self.depth[ancestor] {
            return false;
        }
        self.ancestor_at_depth(class, self.depth[ancestor]) == ancestor
    }

    /// Classes in `universe` with no descendant inside `universe`.
    pub fn leaf_classes(&self, universe: &BTreeSet<usize>) -> BTreeSet<usize> {
        let mut internal = vec![false; self.nodes.len()];
        for &c in universe {
            let mut cur = self.nodes[c].parent;
            while let Some(p) = cur {
                if internal[p] {
                    break;
                }
                internal[p] = true;
                cur = self.nodes[p].parent;
            }
        }
        universe.iter().copied().filter(|&c| !internal[c]).collect()
    }

    pub fn all_classes(&self) -> BTreeSet<usize> {
        (0..self.nodes.len()).collect()
    }

    /// Classes sharing the parent of `class`, excluding it. Roots are mutual siblings.
    pub fn siblings(&self, class: usize) -> Result<BTreeSet<usize>> {
        self.check(class)?;
        let pool: &[usize] = match self.nodes[class].parent {
            Some(p) => &self.nodes[p].children,
            None => &self.roots,
        };
        Ok(pool.iter().copied().filter(|&c| c != class).collect())
    }

    /// Classes at the same depth as `class`, excluding it.
    pub fn same_depth_classes(&self, class: usize) -> Result<BTreeSet<usize>> {
        self.check(class)?;
        let d = self.depth[class];
        Ok((0..self.nodes.len())
            .filter(|&c| c != class && self.depth[c] == d)
            .collect())
    }

    /// Node-level coarsening map: each class goes to its ancestor at `d_max`
    /// when deeper, otherwise to itself.
    pub fn coarsen_map(&self, d_max: u32) -> Vec<usize> {
        (0..self.nodes.len())
            .map(|c| {
                if self.depth[c] > d_max {
                    self.ancestor_at_depth(c, d_max)
                } else {
                    c
                }
            })
            .collect()
    }

    /// Relabels every row to its ancestor at depth `d_max` (shallower labels
    /// stay intact) and renumbers the resulting classes densely. The remap
    /// table maps dense ids back to tree classes.
    pub fn coarsen(&self, labels: &LabelVector, d_max: u32) -> Result<(LabelVector, ClassRemap)> {
        if d_max == 0 {
            return Err(Error::InvalidConfig("d_max must be at least 1".into()));
        }
        if let Some(&bad) = labels.labels().iter().find(|&&l| l as usize >= self.nodes.len()) {
            return Err(Error::UnmappedLabel(bad));
        }
        let map = self.coarsen_map(d_max);
        let coarse: Vec<u32> = labels.labels().iter().map(|&l| map[l as usize] as u32).collect();
        let (dense, remap) = LabelVector::new(coarse, self.nodes.len())?.densify();
        Ok((dense, remap))
    }

    /// Serializes back to the TSV edge-list format.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let parent = n.parent.map(|p| self.nodes[p].id.as_str()).unwrap_or("");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                n.id,
                parent,
                n.name,
                n.lemmas.join("|")
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> SemanticTree {
        let names: Vec<String> = (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let edges: Vec<(&str, Option<&str>)> = (0..n)
            .map(|i| (names[i].as_str(), if i == 0 { None } else { Some(names[i - 1].as_str()) }))
            .collect();
        SemanticTree::from_edges(&edges).unwrap()
    }

    #[test]
    fn depths_and_leaves() {
        let t = SemanticTree::from_edges(&[("a", None), ("b", Some("a")), ("c", Some("a"))]).unwrap();
        assert_eq!((t.depth(0), t.depth(1), t.depth(2)), (1, 2, 2));

        let t = chain(4);
        assert_eq!(t.depth(3), 4);
        assert_eq!(t.leaf_classes(&t.all_classes()), [3].into_iter().collect());
    }

    #[test]
    fn cycle_detected() {
        let err = SemanticTree::from_edges(&[("a", Some("b")), ("b", Some("a"))]).unwrap_err();
        assert!(matches!(err, Error::CycleDetected(_)));
    }

    #[test]
    fn dangling_and_duplicate() {
        assert!(matches!(
            SemanticTree::from_edges(&[("a", None), ("b", Some("zz"))]),
            Err(Error::DanglingParent { .. })
        ));
        assert!(matches!(
            SemanticTree::from_edges(&[("a", None), ("b", Some("a")), ("b", Some("a"))]),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn extra_parent_dropped() {
        let t = SemanticTree::from_edges(&[
            ("a", None),
            ("x", None),
            ("b", Some("a")),
            ("b", Some("x")),
        ])
        .unwrap();
        assert_eq!(t.parent(t.lookup("b").unwrap()), Some(0));
        assert_eq!(t.dropped_parents(), &[("b".to_string(), "x".to_string())]);
    }

    #[test]
    fn tsv_roundtrip() {
        let text = "n1\t\tentity\tentity|thing\nn2\tn1\tfurniture\tfurniture|article of furniture\n";
        let t = SemanticTree::parse_tsv(text).unwrap();
        assert_eq!(t.node(1).lemmas, vec!["furniture", "article of furniture"]);
        assert_eq!(t.to_tsv(), text);
    }

    #[test]
    fn coarsen_examples() {
        let t = chain(3);
        let labels = LabelVector::from_labels(vec![2, 2]);
        let (out, remap) = t.coarsen(&labels, 2).unwrap();
        assert_eq!(out.labels(), &[0, 0]);
        assert_eq!(remap.original, vec![1]);

        let labels = LabelVector::from_labels(vec![0, 1, 2]);
        let (out, remap) = t.coarsen(&labels, 5).unwrap();
        assert_eq!(out.labels(), &[0, 1, 2]);
        assert!(remap.is_identity());

        // a→b→c, a→x ; labels [c, x, b], d_max = 2 → [b, x, b]
        let t = SemanticTree::from_edges(&[
            ("a", None),
            ("b", Some("a")),
            ("c", Some("b")),
            ("x", Some("a")),
        ])
        .unwrap();
        let labels = LabelVector::from_labels(vec![2, 3, 1]);
        let (out, remap) = t.coarsen(&labels, 2).unwrap();
        let as_nodes: Vec<&str> = out
            .labels()
            .iter()
            .map(|&l| t.node(remap.original[l as usize] as usize).id.as_str())
            .collect();
        assert_eq!(as_nodes, ["b", "x", "b"]);

        assert!(matches!(
            t.coarsen(&LabelVector::from_labels(vec![7]), 2),
            Err(Error::UnmappedLabel(7))
        ));
    }

    #[test]
    fn leaf_restriction() {
        let t = chain(3);
        assert_eq!(t.leaf_classes(&[0, 1].into_iter().collect()), [1].into_iter().collect());
        let star = SemanticTree::from_edges(&[
            ("a", None),
            ("b", Some("a")),
            ("c", Some("a")),
            ("d", Some("a")),
        ])
        .unwrap();
        assert_eq!(star.leaf_classes(&star.all_classes()), [1, 2, 3].into_iter().collect());
    }

    #[test]
    fn ancestors() {
        let t = chain(3);
        assert_eq!(t.ancestor_set(2, true).unwrap(), vec![2, 1, 0]);
        assert!(t.ancestor_set(0, false).unwrap().is_empty());
        let f = SemanticTree::from_edges(&[
            ("r1", None),
            ("r2", None),
            ("a", Some("r1")),
            ("b", Some("r2")),
        ])
        .unwrap();
        assert_eq!(f.ancestor_set(3, false).unwrap(), vec![1]);
        assert!(matches!(t.ancestor_set(9, true), Err(Error::UnknownClass(9))));
    }

    #[test]
    fn sibling_queries() {
        let t = SemanticTree::from_edges(&[
            ("a", None),
            ("b", Some("a")),
            ("c", Some("a")),
            ("d", Some("a")),
            ("e", Some("b")),
            ("r", None),
        ])
        .unwrap();
        assert_eq!(t.siblings(1).unwrap(), [2, 3].into_iter().collect());
        assert!(t.siblings(4).unwrap().is_empty());
        assert_eq!(t.siblings(0).unwrap(), [5].into_iter().collect());
        assert_eq!(t.same_depth_classes(1).unwrap(), [2, 3].into_iter().collect());
    }
}
