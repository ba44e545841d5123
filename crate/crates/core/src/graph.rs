//! Three-layer semantic graph of a target word.
//!
//! The root is the mean embedding of all usages of the word, the second
//! layer holds one node per sense cluster (its centroid) and the third
//! layer the `k` vocabulary words nearest to each centroid, tagged with the
//! usage ids of that cluster.
//!
//! DOT node ids: `root`, `c<cluster_id>` and `w<cluster_id>_<rank>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterSet;
use crate::embedding::{average, knn, EmbeddingTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootNode {
    pub lemma: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidNode {
    pub cluster_id: usize,
    pub vector: Vec<f64>,
    pub usage_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafNode {
    pub cluster_id: usize,
    pub word: String,
    pub similarity: f64,
    pub usage_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticGraph {
    pub root: RootNode,
    pub k: usize,
    pub centroids: Vec<CentroidNode>,
    /// Grouped by cluster, most similar word first within each group.
    pub leaves: Vec<LeafNode>,
}

impl SemanticGraph {
    pub fn node_count(&self) -> usize {
        1 + self.centroids.len() + self.leaves.len()
    }

    pub fn edge_count(&self) -> usize {
        self.centroids.len() + self.leaves.len()
    }

    pub fn leaves_of(&self, cluster_id: usize) -> impl Iterator<Item = &LeafNode> {
        self.leaves.iter().filter(move |l| l.cluster_id == cluster_id)
    }

    /// Neighbor words of the cluster that contains `usage_id`.
    pub fn neighbors_of_usage(&self, usage_id: &str) -> Option<Vec<&str>> {
        let c = self
            .centroids
            .iter()
            .find(|c| c.usage_ids.iter().any(|u| u == usage_id))?;
        Some(self.leaves_of(c.cluster_id).map(|l| l.word.as_str()).collect())
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", escape(&self.root.lemma));
        let _ = writeln!(out, "  rankdir=TB;");
        let _ = writeln!(
            out,
            "  root [label=\"{}\", shape=doubleoctagon];",
            escape(&self.root.lemma)
        );
        for c in &self.centroids {
            let _ = writeln!(out, "  subgraph cluster_{} {{", c.cluster_id);
            let _ = writeln!(out, "    label=\"cluster {}\";", c.cluster_id);
            let _ = writeln!(
                out,
                "    c{} [label=\"{}\", shape=ellipse];",
                c.cluster_id,
                escape(&format!("cluster {} ({})", c.cluster_id, c.usage_ids.join(",")))
            );
            for (rank, leaf) in self.leaves_of(c.cluster_id).enumerate() {
                let _ = writeln!(
                    out,
                    "    w{}_{} [label=\"{}\", shape=box, tooltip=\"similarity {:.6}\"];",
                    c.cluster_id,
                    rank,
                    escape(&format!("{} ({})", leaf.word, leaf.usage_ids.join(","))),
                    leaf.similarity
                );
            }
            let _ = writeln!(out, "  }}");
        }
        for c in &self.centroids {
            let _ = writeln!(out, "  root -> c{};", c.cluster_id);
        }
        for c in &self.centroids {
            for rank in 0..self.leaves_of(c.cluster_id).count() {
                let _ = writeln!(out, "  c{0} -> w{0}_{1};", c.cluster_id, rank);
            }
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => {}
            c => out.push(c),
        }
    }
    out
}

/// Build the graph of one lemma. `usage_vecs` must hold every usage of the
/// lemma (the root averages all of them) and include each clustered usage.
pub fn build_graph(
    cs: &ClusterSet,
    usage_vecs: &BTreeMap<String, Vec<f64>>,
    vocab: &EmbeddingTable,
    k: usize,
) -> Result<SemanticGraph> {
    if usage_vecs.is_empty() {
        return Err(Error::EmptyInput("no usage vectors for the graph root"));
    }
    for c in &cs.clusters {
        if let Some(missing) = c.usage_ids.iter().find(|u| !usage_vecs.contains_key(*u)) {
            return Err(Error::MissingEmbedding {
                kind: "usage",
                id: missing.clone(),
            });
        }
    }
    let all: Vec<&Vec<f64>> = usage_vecs.values().collect();
    let root = RootNode {
        lemma: cs.lemma.clone(),
        vector: average(&all)?,
    };
    let exclude = cs.params.exclusions(&cs.lemma);
    let mut centroids = Vec::with_capacity(cs.clusters.len());
    let mut leaves = Vec::with_capacity(cs.clusters.len() * k);
    for c in &cs.clusters {
        let members: Vec<&Vec<f64>> = c.usage_ids.iter().map(|u| &usage_vecs[u]).collect();
        let centroid = average(&members)?;
        let neighbors = knn(&centroid, vocab, k, &exclude)?;
        for n in neighbors.neighbors {
            leaves.push(LeafNode {
                cluster_id: c.cluster_id,
                word: n.word,
                similarity: n.similarity,
                usage_ids: c.usage_ids.clone(),
            });
        }
        centroids.push(CentroidNode {
            cluster_id: c.cluster_id,
            vector: centroid,
            usage_ids: c.usage_ids.clone(),
        });
    }
    Ok(SemanticGraph {
        root,
        k,
        centroids,
        leaves,
    })
}

pub fn export_dot(graph: &SemanticGraph, path: &Path) -> Result<()> {
    crate::corpus::write_atomic(path, graph.to_dot().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{cluster_usages, ClusterParams};
    use crate::embedding::EmbeddingKind;
    use std::collections::HashSet;

    fn vocab() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(EmbeddingKind::Word, 4).unwrap();
        for (g, name) in ["metal", "coin"].iter().enumerate() {
            for w in 0..5 {
                let mut v = vec![0.0; 4];
                v[2 * g] = 1.0;
                v[2 * g + 1] = 0.1 * w as f64;
                t.insert(format!("{name}{w}"), &v).unwrap();
            }
        }
        t
    }

    fn usages() -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([
            ("u1".into(), vec![1.0, 0.1, 0.0, 0.0]),
            ("u2".into(), vec![1.0, 0.15, 0.0, 0.0]),
            ("u3".into(), vec![0.0, 0.0, 1.0, 0.1]),
            ("u4".into(), vec![0.0, 0.0, 1.0, 0.2]),
        ])
    }

    #[test]
    fn single_usage_root_equals_centroid() {
        let u = BTreeMap::from([("u1".to_string(), vec![1.0, 0.1, 0.0, 0.0])]);
        let cs = cluster_usages("kupari", &u, &vocab(), &ClusterParams::new(0.5).with_k(4)).unwrap();
        let g = build_graph(&cs, &u, &vocab(), 4).unwrap();
        assert_eq!(g.root.vector, g.centroids[0].vector);
        assert_eq!(g.node_count(), 1 + 1 + 4);
    }

    #[test]
    fn two_planted_senses_have_disjoint_leaves() {
        let cs = cluster_usages("kupari", &usages(), &vocab(), &ClusterParams::new(0.5).with_k(4)).unwrap();
        assert_eq!(cs.len(), 2);
        let g = build_graph(&cs, &usages(), &vocab(), 4).unwrap();
        assert_eq!(g.node_count(), 1 + 2 + 2 * 4);
        assert_eq!(g.edge_count(), 2 + 2 * 4);
        let a: HashSet<&str> = g.leaves_of(0).map(|l| l.word.as_str()).collect();
        let b: HashSet<&str> = g.leaves_of(1).map(|l| l.word.as_str()).collect();
        assert_eq!(a.len(), 4);
        assert!(a.is_disjoint(&b));
        assert!(a.iter().all(|w| w.starts_with("metal")));
        assert_eq!(g.neighbors_of_usage("u4").unwrap().len(), 4);
        let root_expect = average(&usages().values().collect::<Vec<_>>()).unwrap();
        assert_eq!(g.root.vector, root_expect);
    }

    #[test]
    fn dot_is_deterministic_and_labelled() {
        let cs = cluster_usages("kup\"ari", &usages(), &vocab(), &ClusterParams::new(0.5).with_k(2)).unwrap();
        let g = build_graph(&cs, &usages(), &vocab(), 2).unwrap();
        let dot = g.to_dot();
        assert_eq!(dot, g.to_dot());
        assert!(dot.contains("root [label=\"kup\\\"ari\""));
        assert!(dot.contains("w0_0 [label=\"metal1 (u1,u2)\""), "{dot}");
        assert!(dot.contains("c1 -> w1_1;"));
        assert_eq!(dot.matches("->").count(), g.edge_count());

        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.dot"), dir.path().join("b.dot"));
        export_dot(&g, &p1).unwrap();
        export_dot(&g, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    /// Minimal recursive-descent checker for the DOT subset we emit:
    /// graphs, subgraphs, node statements with attribute lists, edges and
    /// `key=value` statements. Returns declared node ids and edges.
    struct DotChecker<'a> {
        src: &'a [u8],
        pos: usize,
        nodes: Vec<String>,
        edges: Vec<(String, String)>,
    }

    impl<'a> DotChecker<'a> {
        fn parse(src: &'a str) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
            let mut p = DotChecker { src: src.as_bytes(), pos: 0, nodes: vec![], edges: vec![] };
            p.keyword("digraph")?;
            p.id()?;
            p.block()?;
            p.ws();
            if p.pos != p.src.len() {
                return Err(format!("trailing input at {}", p.pos));
            }
            Ok((p.nodes, p.edges))
        }

        fn ws(&mut self) {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
        }

        fn peek(&mut self) -> Option<u8> {
            self.ws();
            self.src.get(self.pos).copied()
        }

        fn expect(&mut self, b: u8) -> std::result::Result<(), String> {
            if self.peek() == Some(b) {
                self.pos += 1;
                Ok(())
            } else {
                Err(format!("expected '{}' at {}", b as char, self.pos))
            }
        }

        fn keyword(&mut self, kw: &str) -> std::result::Result<(), String> {
            let id = self.id()?;
            if id == kw { Ok(()) } else { Err(format!("expected {kw}, got {id}")) }
        }

        fn id(&mut self) -> std::result::Result<String, String> {
            match self.peek() {
                Some(b'"') => {
                    self.pos += 1;
                    let mut out = Vec::new();
                    loop {
                        match self.src.get(self.pos) {
                            None => return Err("unterminated string".into()),
                            Some(b'\\') => {
                                out.push(self.src[self.pos + 1]);
                                self.pos += 2;
                            }
                            Some(b'"') => {
                                self.pos += 1;
                                return Ok(String::from_utf8(out).map_err(|e| e.to_string())?);
                            }
                            Some(b'\n') => return Err("raw newline in string".into()),
                            Some(&c) => {
                                out.push(c);
                                self.pos += 1;
                            }
                        }
                    }
                }
                Some(c) if c.is_ascii_alphanumeric() || c == b'_' || c == b'.' => {
                    let start = self.pos;
                    while self.pos < self.src.len()
                        && (self.src[self.pos].is_ascii_alphanumeric() || matches!(self.src[self.pos], b'_' | b'.'))
                    {
                        self.pos += 1;
                    }
                    Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
                }
                other => Err(format!("expected id at {}, got {:?}", self.pos, other.map(|c| c as char))),
            }
        }

        fn block(&mut self) -> std::result::Result<(), String> {
            self.expect(b'{')?;
            while self.peek() != Some(b'}') {
                self.stmt()?;
            }
            self.expect(b'}')
        }

        fn attrs(&mut self) -> std::result::Result<(), String> {
            self.expect(b'[')?;
            loop {
                self.id()?;
                self.expect(b'=')?;
                self.id()?;
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b']') => {
                        self.pos += 1;
                        return Ok(());
                    }
                    _ => return Err(format!("bad attribute list at {}", self.pos)),
                }
            }
        }

        fn stmt(&mut self) -> std::result::Result<(), String> {
            let first = self.id()?;
            if first == "subgraph" {
                self.id()?;
                return self.block();
            }
            match self.peek() {
                Some(b'=') => {
                    self.pos += 1;
                    self.id()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    self.expect(b'>')?;
                    let to = self.id()?;
                    self.edges.push((first, to));
                }
                Some(b'[') => {
                    self.attrs()?;
                    self.nodes.push(first);
                }
                _ => self.nodes.push(first),
            }
            self.expect(b';')
        }
    }

    #[test]
    fn exported_dot_parses() {
        let cs = cluster_usages("ku\\p\"ari", &usages(), &vocab(), &ClusterParams::new(0.5).with_k(3)).unwrap();
        let g = build_graph(&cs, &usages(), &vocab(), 3).unwrap();
        let (nodes, edges) = DotChecker::parse(&g.to_dot()).unwrap();
        assert_eq!(nodes.len(), g.node_count());
        assert_eq!(edges.len(), g.edge_count());
        let declared: HashSet<&str> = nodes.iter().map(String::as_str).collect();
        assert!(edges.iter().all(|(a, b)| declared.contains(a.as_str()) && declared.contains(b.as_str())));
        assert!(DotChecker::parse("digraph x { a -> ; }").is_err());
    }

    #[test]
    fn missing_usage_vector_is_an_error() {
        let cs = cluster_usages("kupari", &usages(), &vocab(), &ClusterParams::new(0.5).with_k(2)).unwrap();
        let mut partial = usages();
        partial.remove("u3");
        assert!(build_graph(&cs, &partial, &vocab(), 2).is_err());
    }
}
