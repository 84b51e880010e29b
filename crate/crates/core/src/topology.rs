//! Network description: nodes, directed links, monitored paths, and the
//! routing matrix / Gramian derived from them.
//!
//! A topology file is JSON:
//!
//! ```json
//! {
//!   "nodes": ["a", "b", "c"],
//!   "links": [{"id": "ab", "from": "a", "to": "b"}, {"id": "bc", "from": "b", "to": "c"}],
//!   "end_nodes": ["a", "c"],
//!   "paths": [{"id": "a-b", "origin": "a", "links": ["ab"]},
//!             {"id": "a-c", "origin": "a", "links": ["ab", "bc"]}]
//! }
//! ```
//!
//! Path indices follow file order. Bidirectional physical links appear as
//! two directed entries.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path as FsPath;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDocument {
    pub nodes: Vec<String>,
    pub links: Vec<LinkEntry>,
    pub end_nodes: Vec<String>,
    pub paths: Vec<PathEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub id: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathEntry {
    pub id: String,
    pub origin: String,
    pub links: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: String,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Dense index in `0..P`.
    pub id: usize,
    /// Label from the topology file.
    pub label: String,
    pub origin: usize,
    pub links: Vec<usize>,
}

/// A validated network. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    nodes: Vec<String>,
    node_index: BTreeMap<String, usize>,
    links: Vec<Link>,
    end_nodes: Vec<usize>,
    paths: Vec<Path>,
}

impl Network {
    pub fn from_document(doc: &TopologyDocument) -> Result<Self> {
        let mut node_index = BTreeMap::new();
        for (i, name) in doc.nodes.iter().enumerate() {
            if node_index.insert(name.clone(), i).is_some() {
                return Err(Error::topology(format!("nodes[{i}]"), format!("duplicate node `{name}`")));
            }
        }
        let lookup = |name: &str, loc: String| -> Result<usize> {
            node_index
                .get(name)
                .copied()
                .ok_or_else(|| Error::topology(loc, format!("unknown node `{name}`")))
        };

        let mut link_index = BTreeMap::new();
        let mut links = Vec::with_capacity(doc.links.len());
        for (i, entry) in doc.links.iter().enumerate() {
            let from = lookup(&entry.from, format!("links[{i}].from"))?;
            let to = lookup(&entry.to, format!("links[{i}].to"))?;
            if from == to {
                return Err(Error::topology(format!("links[{i}]"), "self-loop link"));
            }
            if link_index.insert(entry.id.clone(), i).is_some() {
                return Err(Error::topology(
                    format!("links[{i}].id"),
                    format!("duplicate link id `{}`", entry.id),
                ));
            }
            links.push(Link {
                id: entry.id.clone(),
                from,
                to,
            });
        }

        let mut end_nodes = Vec::with_capacity(doc.end_nodes.len());
        let mut seen_end = BTreeSet::new();
        for (i, name) in doc.end_nodes.iter().enumerate() {
            let idx = lookup(name, format!("end_nodes[{i}]"))?;
            if !seen_end.insert(idx) {
                return Err(Error::topology(format!("end_nodes[{i}]"), format!("duplicate end node `{name}`")));
            }
            end_nodes.push(idx);
        }

        if doc.paths.is_empty() {
            return Err(Error::topology("paths", "at least one path is required"));
        }
        let mut path_labels = BTreeSet::new();
        let mut paths = Vec::with_capacity(doc.paths.len());
        for (p, entry) in doc.paths.iter().enumerate() {
            if !path_labels.insert(entry.id.clone()) {
                return Err(Error::topology(format!("paths[{p}].id"), format!("duplicate path id `{}`", entry.id)));
            }
            let origin = lookup(&entry.origin, format!("paths[{p}].origin"))?;
            if !seen_end.contains(&origin) {
                return Err(Error::topology(
                    format!("paths[{p}].origin"),
                    format!("origin `{}` is not an end node", entry.origin),
                ));
            }
            if entry.links.is_empty() {
                return Err(Error::topology(format!("paths[{p}].links"), "path has no links"));
            }
            let mut seq: Vec<usize> = Vec::with_capacity(entry.links.len());
            let mut used = BTreeSet::new();
            for (k, link_id) in entry.links.iter().enumerate() {
                let loc = format!("paths[{p}].links[{k}]");
                let l = *link_index
                    .get(link_id)
                    .ok_or_else(|| Error::topology(loc.clone(), format!("unknown link `{link_id}`")))?;
                if !used.insert(l) {
                    return Err(Error::topology(loc, format!("link `{link_id}` repeated in path")));
                }
                if k == 0 {
                    if links[l].from != origin {
                        return Err(Error::topology(
                            loc,
                            format!("first link starts at `{}`, origin is `{}`", doc.nodes[links[l].from], entry.origin),
                        ));
                    }
                } else {
                    let prev: &Link = &links[seq[k - 1]];
                    if prev.to != links[l].from {
                        return Err(Error::topology(
                            loc,
                            format!(
                                "non-contiguous: previous link ends at `{}`, this one starts at `{}`",
                                doc.nodes[prev.to], doc.nodes[links[l].from]
                            ),
                        ));
                    }
                }
                seq.push(l);
            }
            paths.push(Path {
                id: p,
                label: entry.id.clone(),
                origin,
                links: seq,
            });
        }

        Ok(Self {
            nodes: doc.nodes.clone(),
            node_index,
            links,
            end_nodes,
            paths,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: TopologyDocument = serde_json::from_str(text).map_err(|e| {
            Error::topology(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        Self::from_document(&doc)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_document(&self) -> TopologyDocument {
        TopologyDocument {
            nodes: self.nodes.clone(),
            links: self
                .links
                .iter()
                .map(|l| LinkEntry {
                    id: l.id.clone(),
                    from: self.nodes[l.from].clone(),
                    to: self.nodes[l.to].clone(),
                })
                .collect(),
            end_nodes: self.end_nodes.iter().map(|&n| self.nodes[n].clone()).collect(),
            paths: self
                .paths
                .iter()
                .map(|p| PathEntry {
                    id: p.label.clone(),
                    origin: self.nodes[p.origin].clone(),
                    links: p.links.iter().map(|&l| self.links[l].id.clone()).collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn path_count(&self) -> usize {
        self.paths.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    /// End nodes as indices into [`Network::nodes`], in file order.
    pub fn end_nodes(&self) -> &[usize] {
        &self.end_nodes
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.node_index.get(name).copied()
    }

    pub fn routing_matrix(&self) -> RoutingMatrix {
        let mut r = DMatrix::<u32>::zeros(self.paths.len(), self.links.len());
        for path in &self.paths {
            for &l in &path.links {
                r[(path.id, l)] = 1;
            }
        }
        RoutingMatrix(r)
    }

    pub fn gramian(&self) -> Gramian {
        self.routing_matrix().gramian()
    }

    /// Paths whose origin is the end node `node`.
    pub fn paths_by_origin(&self, node: &str) -> Result<Vec<usize>> {
        let idx = self
            .node_index(node)
            .filter(|i| self.end_nodes.contains(i))
            .ok_or_else(|| Error::topology("paths_by_origin", format!("`{node}` is not an end node")))?;
        Ok(self.paths_from(idx))
    }

    fn paths_from(&self, node: usize) -> Vec<usize> {
        self.paths.iter().filter(|p| p.origin == node).map(|p| p.id).collect()
    }

    /// One group of path ids per end node, aligned with [`Network::end_nodes`].
    pub fn origin_groups(&self) -> Vec<Vec<usize>> {
        self.end_nodes.iter().map(|&n| self.paths_from(n)).collect()
    }

    pub fn end_node_names(&self) -> Vec<String> {
        self.end_nodes.iter().map(|&n| self.nodes[n].clone()).collect()
    }
}

/// `P × |E|` path-link incidence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix(DMatrix<u32>);

impl RoutingMatrix {
    pub fn entries(&self) -> &DMatrix<u32> {
        &self.0
    }

    pub fn gramian(&self) -> Gramian {
        Gramian(&self.0 * self.0.transpose())
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.0.map(f64::from)
    }
}

/// `G = R Rᵀ`: diagonal entries count links per path, off-diagonal entries
/// count shared links.
#[derive(Debug, Clone, PartialEq)]
pub struct Gramian(DMatrix<u32>);

impl Gramian {
    pub fn from_counts(counts: DMatrix<u32>) -> Result<Self> {
        if !counts.is_square() || counts != counts.transpose() {
            return Err(Error::Dimension("gramian must be square and symmetric".into()));
        }
        Ok(Self(counts))
    }

    pub fn entries(&self) -> &DMatrix<u32> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.0.map(f64::from)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.iter().map(|&g| f64::from(g) * f64::from(g)).sum()
    }
}

/// Builds a network by shortest-path routing between ordered end-node pairs
/// over an undirected physical graph. Each physical edge becomes two
/// directed links named `a>b` and `b>a`. BFS ties break on the lowest
/// neighbour index, so the result is deterministic.
pub fn shortest_path_network(
    nodes: &[&str],
    edges: &[(&str, &str)],
    end_nodes: &[&str],
    max_paths: Option<usize>,
) -> Result<Network> {
    let doc = shortest_path_document(
        &nodes.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        &edges
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect::<Vec<_>>(),
        &end_nodes.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        max_paths,
    )?;
    Network::from_document(&doc)
}

fn shortest_path_document(
    nodes: &[String],
    edges: &[(String, String)],
    end_nodes: &[String],
    max_paths: Option<usize>,
) -> Result<TopologyDocument> {
    let index: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut adjacency = vec![Vec::new(); nodes.len()];
    let mut links = Vec::new();
    for (a, b) in edges {
        let (ia, ib) = match (index.get(a.as_str()), index.get(b.as_str())) {
            (Some(&x), Some(&y)) => (x, y),
            _ => return Err(Error::topology("edges", format!("unknown endpoint in `{a}`-`{b}`"))),
        };
        adjacency[ia].push(ib);
        adjacency[ib].push(ia);
        links.push(LinkEntry {
            id: format!("{a}>{b}"),
            from: a.clone(),
            to: b.clone(),
        });
        links.push(LinkEntry {
            id: format!("{b}>{a}"),
            from: b.clone(),
            to: a.clone(),
        });
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }

    let mut paths = Vec::new();
    'outer: for src in end_nodes {
        let s = *index
            .get(src.as_str())
            .ok_or_else(|| Error::topology("end_nodes", format!("unknown end node `{src}`")))?;
        let mut parent = vec![usize::MAX; nodes.len()];
        parent[s] = s;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if parent[v] == usize::MAX {
                    parent[v] = u;
                    queue.push_back(v);
                }
            }
        }
        for dst in end_nodes {
            if dst == src {
                continue;
            }
            let d = index[dst.as_str()];
            if parent[d] == usize::MAX {
                return Err(Error::topology("edges", format!("`{dst}` unreachable from `{src}`")));
            }
            let mut hops = Vec::new();
            let mut cur = d;
            while cur != s {
                hops.push(format!("{}>{}", nodes[parent[cur]], nodes[cur]));
                cur = parent[cur];
            }
            hops.reverse();
            paths.push(PathEntry {
                id: format!("{src}->{dst}"),
                origin: src.clone(),
                links: hops,
            });
            if max_paths.is_some_and(|m| paths.len() >= m) {
                break 'outer;
            }
        }
    }
    Ok(TopologyDocument {
        nodes: nodes.to_vec(),
        links,
        end_nodes: end_nodes.to_vec(),
        paths,
    })
}

/// Random synthetic network: a ring of routers with random chords, each end
/// node attached to one router. Paths are shortest paths between ordered
/// end-node pairs, taken in a seed-dependent order and truncated to
/// `path_count`.
pub fn random_network(end_nodes: usize, routers: usize, path_count: usize, seed: u64) -> Result<Network> {
    if end_nodes < 2 || routers < 3 {
        return Err(Error::InvalidParameter(
            "random network needs at least 2 end nodes and 3 routers".into(),
        ));
    }
    let max_paths = end_nodes * (end_nodes - 1);
    if path_count == 0 || path_count > max_paths {
        return Err(Error::InvalidParameter(format!(
            "path count must be in 1..={max_paths} for {end_nodes} end nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let router_names: Vec<String> = (0..routers).map(|i| format!("r{i}")).collect();
    let end_names: Vec<String> = (0..end_nodes).map(|i| format!("e{i}")).collect();
    let mut edges: BTreeSet<(usize, usize)> = (0..routers).map(|i| (i.min((i + 1) % routers), i.max((i + 1) % routers))).collect();
    for _ in 0..routers / 2 {
        let a = rng.random_range(0..routers);
        let b = rng.random_range(0..routers);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let mut edge_names: Vec<(String, String)> = edges
        .iter()
        .map(|&(a, b)| (router_names[a].clone(), router_names[b].clone()))
        .collect();
    for e in &end_names {
        let r = rng.random_range(0..routers);
        edge_names.push((e.clone(), router_names[r].clone()));
    }
    let nodes: Vec<String> = end_names.iter().chain(router_names.iter()).cloned().collect();
    let mut doc = shortest_path_document(&nodes, &edge_names, &end_names, None)?;
    let mut order: Vec<usize> = (0..doc.paths.len()).collect();
    order.shuffle(&mut rng);
    let mut keep: Vec<usize> = order.into_iter().take(path_count).collect();
    keep.sort_unstable();
    doc.paths = keep.into_iter().map(|i| doc.paths[i].clone()).collect();
    // drop end nodes left with no originating path so every group is non-empty
    let origins: BTreeSet<&str> = doc.paths.iter().map(|p| p.origin.as_str()).collect();
    doc.end_nodes.retain(|e| origins.contains(e.as_str()));
    Network::from_document(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use proptest::prelude::*;

    pub(crate) const CHAIN: &str = r#"{
        "nodes": ["1", "2", "3"],
        "links": [{"id": "a", "from": "1", "to": "2"}, {"id": "b", "from": "2", "to": "3"}],
        "end_nodes": ["1", "3"],
        "paths": [{"id": "p0", "origin": "1", "links": ["a"]},
                  {"id": "p1", "origin": "1", "links": ["a", "b"]}]
    }"#;

    #[test]
    fn chain_network_loads() {
        let net = Network::from_json_str(CHAIN).unwrap();
        assert_eq!(net.path_count(), 2);
        assert_eq!(net.link_count(), 2);
        let r = net.routing_matrix();
        assert_eq!(r.entries(), &DMatrix::from_row_slice(2, 2, &[1, 0, 1, 1]));
        assert_eq!(r.gramian().entries(), &DMatrix::from_row_slice(2, 2, &[1, 1, 1, 2]));
    }

    #[test]
    fn chain_paths_by_origin() {
        let net = Network::from_json_str(CHAIN).unwrap();
        assert_eq!(net.paths_by_origin("1").unwrap(), vec![0, 1]);
        assert!(net.paths_by_origin("3").unwrap().is_empty());
        assert!(net.paths_by_origin("2").is_err());
        assert!(net.paths_by_origin("nope").is_err());
    }

    #[test]
    fn unknown_link_is_located() {
        let text = CHAIN.replace(r#"["a", "b"]"#, r#"["a", "zz"]"#);
        match Network::from_json_str(&text) {
            Err(Error::Topology { location, .. }) => assert_eq!(location, "paths[1].links[1]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_contiguous_path_rejected() {
        let text = CHAIN.replace(r#"["a", "b"]"#, r#"["b", "a"]"#);
        let err = Network::from_json_str(&text).unwrap_err();
        assert!(matches!(err, Error::Topology { ref location, .. } if location == "paths[1].links[0]"));
    }

    #[test]
    fn dangling_link_endpoint_rejected() {
        let text = CHAIN.replace(r#""to": "3""#, r#""to": "9""#);
        let err = Network::from_json_str(&text).unwrap_err();
        assert!(matches!(err, Error::Topology { ref location, .. } if location == "links[1].to"));
    }

    #[test]
    fn malformed_document_rejected() {
        assert!(matches!(
            Network::from_json_str("{\"nodes\": [").unwrap_err(),
            Error::Topology { .. }
        ));
        let no_paths = r#"{"nodes": ["a"], "links": [], "end_nodes": ["a"], "paths": []}"#;
        assert!(Network::from_json_str(no_paths).is_err());
    }

    #[test]
    fn single_path_row_has_one_per_link() {
        let net = shortest_path_network(&["a", "b", "c", "d"], &[("a", "b"), ("b", "c"), ("c", "d")], &["a", "d"], Some(1))
            .unwrap();
        let r = net.routing_matrix();
        assert_eq!(r.entries().row(0).iter().sum::<u32>(), 3);
    }

    #[test]
    fn disjoint_paths_have_zero_overlap() {
        let net = shortest_path_network(&["a", "b", "c", "d"], &[("a", "b"), ("c", "d")], &["a", "b"], None).unwrap();
        let g = net.gramian();
        assert_eq!(g.entries()[(0, 1)], 0);
        let r = net.routing_matrix();
        for l in 0..net.link_count() {
            assert!(r.entries()[(0, l)] * r.entries()[(1, l)] == 0);
        }
    }

    #[test]
    fn identical_paths_share_everything() {
        let text = r#"{
            "nodes": ["x", "y"],
            "links": [{"id": "l", "from": "x", "to": "y"}],
            "end_nodes": ["x"],
            "paths": [{"id": "a", "origin": "x", "links": ["l"]}, {"id": "b", "origin": "x", "links": ["l"]}]
        }"#;
        let g = Network::from_json_str(text).unwrap().gramian();
        assert_eq!(g.entries()[(0, 1)], g.entries()[(0, 0)]);
        assert_eq!(g.entries()[(0, 1)], g.entries()[(1, 1)]);
    }

    #[test]
    fn document_round_trip() {
        let net = Network::from_json_str(CHAIN).unwrap();
        let again = Network::from_document(&net.to_document()).unwrap();
        assert_eq!(net, again);
    }

    fn check_structure(net: &Network) {
        let r = net.routing_matrix();
        let g = r.gramian();
        let (rr, gg) = (r.entries(), g.entries());
        let p = net.path_count();
        for i in 0..p {
            assert_eq!(rr.row(i).iter().sum::<u32>() as usize, net.paths()[i].links.len());
            for j in 0..p {
                let brute: u32 = (0..net.link_count()).map(|l| rr[(i, l)] * rr[(j, l)]).sum();
                assert_eq!(gg[(i, j)], brute);
                assert_eq!(gg[(i, j)], gg[(j, i)]);
                assert!(gg[(i, j)] <= gg[(i, i)].min(gg[(j, j)]));
            }
        }
        let gf = g.to_f64();
        assert!(min_eigenvalue(&gf) >= -1e-10 * gf.norm());
        let groups = net.origin_groups();
        let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(before, all.len(), "origin groups overlap");
        assert_eq!(all, (0..p).collect::<Vec<_>>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn random_networks_satisfy_structure(seed in 0u64..10_000, ends in 2usize..7, routers in 3usize..9) {
            let max = ends * (ends - 1);
            let net = random_network(ends, routers, max.min(12), seed).unwrap();
            check_structure(&net);
        }
    }
}
