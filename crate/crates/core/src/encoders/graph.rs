//! Heterogeneous post / comment / user graph.
//!
//! Post and comment nodes carry the mean word vector of their text, users the
//! mean of everything they authored. Nodes are linked when their cosine
//! similarity reaches the threshold, and always along authorship and
//! comment-of relations. Every edge is undirected with the cosine similarity
//! of its endpoints as weight; every node has a unit self-loop.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use super::records::{CommentRecord, PostRecord, UserRecord};
use super::text::WordVectors;
use crate::autodiff::{cosine, Adjacency, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Post,
    Comment,
    User,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    /// Minimum cosine similarity for a similarity edge.
    pub theta: f64,
    /// Allow similarity edges between nodes of different kinds.
    pub cross_kind: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            cross_kind: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SocialGraph {
    nodes: Vec<GraphNode>,
    /// Sorted `(neighbour, weight)` lists, self-loop included.
    adj: Vec<Vec<(usize, f64)>>,
    index: HashMap<(NodeKind, String), usize>,
}

impl SocialGraph {
    /// Assembles a graph from explicit nodes and undirected edges; self-loops
    /// are added for every node.
    pub fn from_parts(nodes: Vec<GraphNode>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = nodes.len();
        let mut index = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if index.insert((node.kind, node.id.clone()), i).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate {:?} node `{}`",
                    node.kind, node.id
                )));
            }
        }
        let mut g = Self {
            nodes,
            adj: vec![Vec::new(); n],
            index,
        };
        for i in 0..n {
            g.link(i, i, 1.0);
        }
        for &(a, b, w) in edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format!(
                    "edge ({a}, {b}) references a missing node"
                )));
            }
            if w.abs() > 1.0 + 1e-12 {
                return Err(Error::invalid(format!("edge weight {w} outside [-1, 1]")));
            }
            g.link(a, b, w);
        }
        Ok(g)
    }

    fn link(&mut self, a: usize, b: usize, w: f64) {
        for (x, y) in [(a, b), (b, a)] {
            let list = &mut self.adj[x];
            match list.binary_search_by_key(&y, |&(j, _)| j) {
                Ok(_) => {}
                Err(pos) => list.insert(pos, (y, w)),
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &GraphNode {
        &self.nodes[i]
    }

    pub fn find(&self, kind: NodeKind, id: &str) -> Option<usize> {
        self.index.get(&(kind, id.to_string())).copied()
    }

    pub fn post_node(&self, post_id: &str) -> Result<usize> {
        self.find(NodeKind::Post, post_id)
            .ok_or_else(|| Error::invalid(format!("unknown post id `{post_id}`")))
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<f64> {
        let list = &self.adj[a];
        list.binary_search_by_key(&b, |&(j, _)| j)
            .ok()
            .map(|p| list[p].1)
    }

    /// Directed edge list (both directions of every undirected edge, plus self-loops).
    pub fn edges(&self) -> Vec<Edge> {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(i, list)| {
                list.iter().map(move |&(j, w)| Edge {
                    src: j,
                    dst: i,
                    weight: w,
                })
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.embedding.len())
    }

    /// Node embeddings as an `[N × d]` matrix.
    pub fn features(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.nodes.iter().map(|n| n.embedding.clone()).collect();
        Tensor::from_rows(&rows).expect("equal embedding dims")
    }

    pub fn adjacency(&self) -> Arc<Adjacency> {
        let lists: Vec<Vec<usize>> = self
            .adj
            .iter()
            .map(|l| l.iter().map(|&(j, _)| j).collect())
            .collect();
        Arc::new(Adjacency::from_lists(&lists))
    }

    /// Nodes within `hops` edges of any seed, ascending.
    pub fn receptive_field(&self, seeds: &[usize], hops: usize) -> Vec<usize> {
        let mut seen: BTreeSet<usize> = seeds.iter().copied().collect();
        let mut frontier: Vec<usize> = seen.iter().copied().collect();
        for _ in 0..hops {
            let mut next = Vec::new();
            for &i in &frontier {
                for &(j, _) in &self.adj[i] {
                    if seen.insert(j) {
                        next.push(j);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        seen.into_iter().collect()
    }

    /// Induced subgraph on `nodes` (ascending): its adjacency and features.
    pub fn induced(&self, nodes: &[usize]) -> (Arc<Adjacency>, Tensor) {
        let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        let lists: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&g| {
                self.adj[g]
                    .iter()
                    .filter_map(|(j, _)| local.get(j).copied())
                    .collect()
            })
            .collect();
        let rows: Vec<Vec<f64>> = nodes
            .iter()
            .map(|&g| self.nodes[g].embedding.clone())
            .collect();
        (
            Arc::new(Adjacency::from_lists(&lists)),
            Tensor::from_rows(&rows).expect("equal embedding dims"),
        )
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.node_count()).all(|i| {
            self.adj[i]
                .iter()
                .all(|&(j, w)| self.weight(j, i) == Some(w))
        })
    }
}

/// Builds the social graph from raw records.
pub fn build_social_graph(
    posts: &[PostRecord],
    comments: &[CommentRecord],
    users: &[UserRecord],
    words: &WordVectors,
    cfg: &GraphConfig,
) -> Result<SocialGraph> {
    let d = words.dim();
    let mut nodes = Vec::with_capacity(posts.len() + comments.len() + users.len());
    for p in posts {
        nodes.push(GraphNode {
            id: p.id.clone(),
            kind: NodeKind::Post,
            embedding: words.mean_embedding(&p.tokens),
        });
    }
    for c in comments {
        nodes.push(GraphNode {
            id: c.id.clone(),
            kind: NodeKind::Comment,
            embedding: words.mean_embedding(&c.tokens),
        });
    }
    let user_base = nodes.len();
    for u in users {
        nodes.push(GraphNode {
            id: u.id.clone(),
            kind: NodeKind::User,
            embedding: vec![0.0; d],
        });
    }
    let mut index: HashMap<(NodeKind, &str), usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if index.insert((n.kind, n.id.as_str()), i).is_some() {
            return Err(Error::invalid(format!(
                "duplicate {:?} id `{}`",
                n.kind, n.id
            )));
        }
    }
    let lookup = |kind: NodeKind, id: &str, ctx: &str| -> Result<usize> {
        index
            .get(&(kind, id))
            .copied()
            .ok_or_else(|| Error::invalid(format!("{ctx} references missing {kind:?} `{id}`")))
    };

    let mut structural: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut authored: Vec<Vec<usize>> = vec![Vec::new(); users.len()];
    for (pi, p) in posts.iter().enumerate() {
        let u = lookup(NodeKind::User, &p.user_id, &format!("post `{}`", p.id))?;
        authored[u - user_base].push(pi);
        structural.insert((pi.min(u), pi.max(u)));
        for cid in &p.comment_ids {
            let c = lookup(NodeKind::Comment, cid, &format!("post `{}`", p.id))?;
            structural.insert((pi.min(c), pi.max(c)));
        }
    }
    for (ci, c) in comments.iter().enumerate() {
        let node = posts.len() + ci;
        let u = lookup(NodeKind::User, &c.user_id, &format!("comment `{}`", c.id))?;
        let p = lookup(NodeKind::Post, &c.post_id, &format!("comment `{}`", c.id))?;
        authored[u - user_base].push(node);
        structural.insert((node.min(u), node.max(u)));
        structural.insert((node.min(p), node.max(p)));
    }
    for (ui, items) in authored.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for &i in items {
            for (m, v) in mean.iter_mut().zip(&nodes[i].embedding) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= items.len() as f64);
        nodes[user_base + ui].embedding = mean;
    }

    let mut edges: Vec<(usize, usize, f64)> = structural
        .iter()
        .map(|&(a, b)| {
            (
                a,
                b,
                cosine(&nodes[a].embedding, &nodes[b].embedding).clamp(-1.0, 1.0),
            )
        })
        .collect();
    let n = nodes.len();
    for a in 0..n {
        for b in a + 1..n {
            if !cfg.cross_kind && nodes[a].kind != nodes[b].kind {
                continue;
            }
            let s = cosine(&nodes[a].embedding, &nodes[b].embedding).clamp(-1.0, 1.0);
            if s >= cfg.theta && !structural.contains(&(a, b)) {
                edges.push((a, b, s));
            }
        }
    }
    SocialGraph::from_parts(nodes, &edges)
}
