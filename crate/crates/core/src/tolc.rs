//! Tree of legal clarifications.
//!
//! An ambiguous query becomes the root of a complete K-ary tree. Each node
//! above the last layer is expanded by retrieving related cases and asking
//! the chat backend for exactly K yes/no questions grounded in them. The
//! user marks nodes Yes or No; the marked facts are folded into the prompt
//! the lawyer answers.
//!
//! Nodes are numbered breadth-first from 1. The k-th node of layer h has
//! index `(K^(h-1) - 1)/(K - 1) + k`, and child `c` (1-based) of the node at
//! position `k` sits at position `(k - 1)K + c` of the next layer.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{self, mock::fnv1a, ChatBackend, ChatMessage, ChatRequest};
use crate::error::{Error, Result};

pub const CLARIFY_TASK: &str = "Task: CLARIFY legal elements.";
pub const DEFAULT_BRANCHING: usize = 3;
pub const DEFAULT_HEIGHT: usize = 3;
pub const DEFAULT_RETRIEVAL_K: usize = 3;
pub const GENERATION_TEMPERATURE: f64 = 0.7;
/// One initial attempt plus three retries.
pub const GENERATION_ATTEMPTS: usize = 4;
const EXCERPT_CHARS: usize = 300;

fn pow(base: usize, exp: usize) -> Result<usize> {
    u32::try_from(exp)
        .ok()
        .and_then(|e| base.checked_pow(e))
        .ok_or_else(|| Error::Usage(format!("tree too large: {base}^{exp}")))
}

/// Nodes in layer `h` of a complete `branching`-ary tree.
pub fn layer_size(h: usize, branching: usize) -> Result<usize> {
    pow(branching, h - 1)
}

/// Nodes in a complete tree of height `height`.
pub fn node_count(branching: usize, height: usize) -> Result<usize> {
    if branching < 2 {
        return Err(Error::Usage(format!("branching factor must be at least 2, got {branching}")));
    }
    Ok((pow(branching, height)? - 1) / (branching - 1))
}

/// Breadth-first index of the `k`-th node (1-based) of layer `h`.
pub fn node_index(h: usize, k: usize, branching: usize) -> Result<usize> {
    if branching < 2 {
        return Err(Error::Usage(format!("branching factor must be at least 2, got {branching}")));
    }
    if h == 0 {
        return Err(Error::Usage("layers are numbered from 1".into()));
    }
    let width = layer_size(h, branching)?;
    if k == 0 || k > width {
        return Err(Error::Usage(format!(
            "position {k} is outside layer {h}, which holds {width} nodes"
        )));
    }
    Ok((width - 1) / (branching - 1) + k)
}

/// Inverse of [`node_index`]: `(layer, position)`.
pub fn node_position(index: usize, branching: usize) -> Result<(usize, usize)> {
    if index == 0 {
        return Err(Error::Usage("node indices start at 1".into()));
    }
    let mut h = 1;
    let mut first = 1;
    loop {
        let width = layer_size(h, branching)?;
        if index < first + width {
            return Ok((h, index - first + 1));
        }
        first += width;
        h += 1;
    }
}

pub fn parent_index(index: usize, branching: usize) -> Result<Option<usize>> {
    let (h, k) = node_position(index, branching)?;
    if h == 1 {
        return Ok(None);
    }
    node_index(h - 1, k.div_ceil(branching), branching).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Yes,
    No,
}

/// User marks keyed by node index; on the wire `{"2": "yes", "5": "no"}`.
pub type Marks = BTreeMap<usize, Mark>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeMark {
    Yes,
    No,
    #[default]
    Unmarked,
}

impl From<Mark> for NodeMark {
    fn from(m: Mark) -> Self {
        match m {
            Mark::Yes => NodeMark::Yes,
            Mark::No => NodeMark::No,
        }
    }
}

/// Where a node's text came from. Nodes can only be built from the user
/// query or from a parsed backend reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    UserQuery,
    Backend { parent_index: usize, attempt: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarificationNode {
    pub index: usize,
    pub layer: usize,
    pub text: String,
    /// Cases retrieved when this node was expanded; empty for leaves.
    pub retrieved_case_ids: Vec<String>,
    pub mark: NodeMark,
    pub provenance: Provenance,
}

impl ClarificationNode {
    fn root(query: &str) -> Self {
        ClarificationNode {
            index: 1,
            layer: 1,
            text: query.to_string(),
            retrieved_case_ids: Vec::new(),
            mark: NodeMark::Unmarked,
            provenance: Provenance::UserQuery,
        }
    }

    fn generated(index: usize, layer: usize, text: String, parent_index: usize, attempt: u32) -> Self {
        ClarificationNode {
            index,
            layer,
            text,
            retrieved_case_ids: Vec::new(),
            mark: NodeMark::Unmarked,
            provenance: Provenance::Backend {
                parent_index,
                attempt,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRecord")]
pub struct ClarificationTree {
    #[serde(rename = "K")]
    branching: usize,
    #[serde(rename = "H")]
    height: usize,
    origin_turn: usize,
    nodes: Vec<ClarificationNode>,
}

#[derive(Deserialize)]
struct TreeRecord {
    #[serde(rename = "K")]
    branching: usize,
    #[serde(rename = "H")]
    height: usize,
    origin_turn: usize,
    nodes: Vec<ClarificationNode>,
}

impl TryFrom<TreeRecord> for ClarificationTree {
    type Error = Error;

    fn try_from(r: TreeRecord) -> Result<Self> {
        if r.height == 0 {
            return Err(Error::Usage("tree height must be at least 1".into()));
        }
        let expected = node_count(r.branching, r.height)?;
        if r.nodes.len() != expected {
            return Err(Error::Usage(format!(
                "tree with K={} H={} needs {expected} nodes, found {}",
                r.branching,
                r.height,
                r.nodes.len()
            )));
        }
        for (i, node) in r.nodes.iter().enumerate() {
            let (layer, _) = node_position(i + 1, r.branching)?;
            if node.index != i + 1 || node.layer != layer {
                return Err(Error::Usage(format!("tree node {} is out of place", i + 1)));
            }
            let root = i == 0;
            if root != (node.provenance == Provenance::UserQuery) {
                return Err(Error::Usage(format!("tree node {} has wrong provenance", i + 1)));
            }
        }
        Ok(ClarificationTree {
            branching: r.branching,
            height: r.height,
            origin_turn: r.origin_turn,
            nodes: r.nodes,
        })
    }
}

/// Facts established by the user's marks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedSet {
    pub root_query: String,
    pub affirmed: Vec<String>,
    pub negated: Vec<String>,
}

impl VerifiedSet {
    pub fn root_only(root_query: impl Into<String>) -> Self {
        VerifiedSet {
            root_query: root_query.into(),
            affirmed: Vec::new(),
            negated: Vec::new(),
        }
    }
}

impl ClarificationTree {
    pub fn branching(&self) -> usize {
        self.branching
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn origin_turn(&self) -> usize {
        self.origin_turn
    }
    pub fn nodes(&self) -> &[ClarificationNode] {
        &self.nodes
    }
    pub fn root(&self) -> &ClarificationNode {
        &self.nodes[0]
    }

    pub fn node(&self, index: usize) -> Option<&ClarificationNode> {
        index.checked_sub(1).and_then(|i| self.nodes.get(i))
    }

    /// Nodes of layer `h` in position order.
    pub fn layer(&self, h: usize) -> &[ClarificationNode] {
        if h == 0 || h > self.height {
            return &[];
        }
        let first = node_index(h, 1, self.branching).expect("layer within height");
        let width = layer_size(h, self.branching).expect("layer within height");
        &self.nodes[first - 1..first - 1 + width]
    }

    pub fn parent_of(&self, index: usize) -> Option<usize> {
        parent_index(index, self.branching).ok().flatten()
    }

    fn check_marks(&self, marks: &Marks) -> Result<()> {
        for &index in marks.keys() {
            if index == 1 {
                return Err(Error::Usage("the root node is the query itself and cannot be marked".into()));
            }
            if self.node(index).is_none() {
                return Err(Error::Usage(format!(
                    "node {index} does not exist; the tree has {} nodes",
                    self.nodes.len()
                )));
            }
        }
        Ok(())
    }

    /// Partitions the marked nodes into affirmed and negated facts, in index order.
    pub fn apply_marks(&self, marks: &Marks) -> Result<VerifiedSet> {
        self.check_marks(marks)?;
        let mut verified = VerifiedSet::root_only(&self.root().text);
        let mut seen: HashMap<&str, Mark> = HashMap::new();
        for (&index, &mark) in marks {
            let text = self.nodes[index - 1].text.as_str();
            match seen.insert(text, mark) {
                Some(prev) if prev != mark => {
                    return Err(Error::Usage(format!(
                        "question \"{text}\" is marked both yes and no"
                    )))
                }
                Some(_) => continue,
                None => {}
            }
            match mark {
                Mark::Yes => verified.affirmed.push(text.to_string()),
                Mark::No => verified.negated.push(text.to_string()),
            }
        }
        Ok(verified)
    }

    /// Copy of the tree with the marks recorded on its nodes.
    pub fn with_marks(&self, marks: &Marks) -> Result<ClarificationTree> {
        self.check_marks(marks)?;
        let mut tree = self.clone();
        for node in &mut tree.nodes {
            node.mark = marks.get(&node.index).copied().map_or(NodeMark::Unmarked, NodeMark::from);
        }
        Ok(tree)
    }

    pub fn view(&self) -> TreeView {
        TreeView {
            k: self.branching,
            h: self.height,
            nodes: self
                .nodes
                .iter()
                .map(|n| TreeViewNode {
                    index: n.index,
                    layer: n.layer,
                    parent_index: self.parent_of(n.index),
                    text: n.text.clone(),
                    mark: n.mark,
                })
                .collect(),
        }
    }
}

/// Tree shape sent to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeView {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub nodes: Vec<TreeViewNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeViewNode {
    pub index: usize,
    pub layer: usize,
    pub parent_index: Option<usize>,
    pub text: String,
    pub mark: NodeMark,
}

pub const AFFIRMED_HEADER: &str = "Affirmed facts:";
pub const NEGATED_HEADER: &str = "Facts that do NOT apply:";

/// Lawyer input built from a verified set; empty sections are left out.
pub fn compose_clarified_prompt(verified: &VerifiedSet) -> String {
    let mut out = format!("Client question: {}", verified.root_query);
    for (header, items) in [
        (AFFIRMED_HEADER, &verified.affirmed),
        (NEGATED_HEADER, &verified.negated),
    ] {
        if items.is_empty() {
            continue;
        }
        out.push_str("\n\n");
        out.push_str(header);
        for item in items {
            out.push_str("\n- ");
            out.push_str(item);
        }
    }
    out
}

/// A retrieved precedent as shown to the clarification prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSnippet {
    pub case_id: String,
    pub title: String,
    pub excerpt: String,
}

pub trait CaseRetriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<CaseSnippet>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub branching: usize,
    pub height: usize,
    pub retrieval_k: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            branching: DEFAULT_BRANCHING,
            height: DEFAULT_HEIGHT,
            retrieval_k: DEFAULT_RETRIEVAL_K,
            temperature: GENERATION_TEMPERATURE,
            max_tokens: 512,
        }
    }
}

fn clarify_messages(root: &str, node: &ClarificationNode, cases: &[CaseSnippet], k: usize) -> Vec<ChatMessage> {
    let mut task = format!("{CLARIFY_TASK} K={k}\nClient question: {root}\n");
    if node.index != 1 {
        task.push_str(&format!("Clarification being explored: {}\n", node.text));
    }
    if !cases.is_empty() {
        task.push_str("Related cases:\n");
        for c in cases {
            let excerpt: String = c.excerpt.chars().take(EXCERPT_CHARS).collect();
            task.push_str(&format!("[{}] {}: {}\n", c.case_id, c.title, excerpt));
        }
    }
    task.push_str(&format!(
        "Write exactly {k} yes/no questions the client can answer to clarify the legal facts \
         that matter here. Reply with a numbered list from 1. to {k}., one question per line, \
         and nothing else."
    ));
    vec![
        ChatMessage::system(
            "You help clients state the facts of their legal matter. Ask about facts; never assume them.",
        ),
        ChatMessage::user(task),
    ]
}

fn format_reminder(k: usize) -> String {
    format!(
        "\n\nFormat reminder: the previous reply could not be used. Answer with exactly {k} lines \
         numbered 1. to {k}. and no other text. K={k}"
    )
}

/// Parses a strictly numbered list `1. … K.`; other lines are ignored. The
/// marker may be followed by `.`, `)`, `:` or `、`.
pub fn parse_numbered_list(text: &str, k: usize) -> Option<Vec<String>> {
    let mut items = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let digits: String = line.chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() {
            continue;
        }
        let rest = &line[digits.len()..];
        let Some(rest) = rest
            .strip_prefix('.')
            .or_else(|| rest.strip_prefix(')'))
            .or_else(|| rest.strip_prefix(':'))
            .or_else(|| rest.strip_prefix('、'))
        else {
            continue;
        };
        let n: usize = digits.parse().ok()?;
        if n != items.len() + 1 {
            return None;
        }
        let item = rest.trim();
        if item.is_empty() {
            return None;
        }
        items.push(item.to_string());
    }
    (items.len() == k).then_some(items)
}

fn node_seed(seed: u64, index: usize) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..].copy_from_slice(&(index as u64).to_le_bytes());
    fnv1a(&bytes)
}

struct Expansion {
    case_ids: Vec<String>,
    children: Vec<String>,
    attempt: u32,
}

fn expand(
    root: &str,
    node: &ClarificationNode,
    chat: &dyn ChatBackend,
    retriever: &dyn CaseRetriever,
    params: &TreeParams,
    seed: u64,
) -> Result<Expansion> {
    let cases = retriever.retrieve(&node.text, params.retrieval_k)?;
    let mut messages = clarify_messages(root, node, &cases, params.branching);
    let mut raw = String::new();
    for attempt in 0..GENERATION_ATTEMPTS {
        if attempt > 0 {
            let last = messages.last_mut().expect("user message");
            last.content.push_str(&format_reminder(params.branching));
        }
        let request = ChatRequest::new(
            messages.clone(),
            params.temperature,
            params.max_tokens,
            node_seed(seed, node.index),
        );
        raw = backend::chat(chat, &request)?;
        if let Some(children) = parse_numbered_list(&raw, params.branching) {
            return Ok(Expansion {
                case_ids: cases.into_iter().map(|c| c.case_id).collect(),
                children,
                attempt: attempt as u32,
            });
        }
        tracing::warn!(node = node.index, attempt, "clarification reply was not a numbered list");
    }
    Err(Error::Generation {
        attempts: GENERATION_ATTEMPTS,
        raw,
    })
}

/// Builds the complete tree layer by layer; siblings expand concurrently.
pub fn build_tree(
    query: &str,
    origin_turn: usize,
    chat: &dyn ChatBackend,
    retriever: &dyn CaseRetriever,
    params: &TreeParams,
    seed: u64,
) -> Result<ClarificationTree> {
    if params.height == 0 {
        return Err(Error::Usage("tree height must be at least 1".into()));
    }
    if params.retrieval_k == 0 {
        return Err(Error::Usage("retrieval k must be at least 1".into()));
    }
    let k = params.branching;
    node_count(k, params.height)?;
    if query.trim().is_empty() {
        return Err(Error::Usage("cannot clarify an empty query".into()));
    }

    let mut nodes = vec![ClarificationNode::root(query)];
    for h in 1..params.height {
        let first = node_index(h, 1, k)?;
        let width = layer_size(h, k)?;
        let expansions: Vec<Expansion> = nodes[first - 1..first - 1 + width]
            .par_iter()
            .map(|node| expand(query, node, chat, retriever, params, seed))
            .collect::<Result<_>>()?;
        for (offset, expansion) in expansions.into_iter().enumerate() {
            let parent = first + offset;
            nodes[parent - 1].retrieved_case_ids = expansion.case_ids;
            for (c, text) in expansion.children.into_iter().enumerate() {
                let position = offset * k + c + 1;
                let index = node_index(h + 1, position, k)?;
                debug_assert_eq!(index, nodes.len() + 1);
                nodes.push(ClarificationNode::generated(index, h + 1, text, parent, expansion.attempt));
            }
        }
    }
    Ok(ClarificationTree {
        branching: k,
        height: params.height,
        origin_turn,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockChat;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    struct CountingRetriever(AtomicUsize);

    impl CaseRetriever for CountingRetriever {
        fn retrieve(&self, _query: &str, k: usize) -> Result<Vec<CaseSnippet>> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok((0..k)
                .map(|i| CaseSnippet {
                    case_id: format!("c{i}"),
                    title: "t".into(),
                    excerpt: "e".into(),
                })
                .collect())
        }
    }

    struct RecordingChat {
        inner: MockChat,
        replies: Mutex<Vec<String>>,
    }

    impl ChatBackend for RecordingChat {
        fn chat(&self, request: &ChatRequest) -> Result<String> {
            let reply = self.inner.chat(request)?;
            self.replies.lock().unwrap().push(reply.clone());
            Ok(reply)
        }
    }

    struct Fixed(&'static str, AtomicUsize);

    impl ChatBackend for Fixed {
        fn chat(&self, _: &ChatRequest) -> Result<String> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Ok(self.0.to_string())
        }
    }

    fn params(k: usize, h: usize) -> TreeParams {
        TreeParams {
            branching: k,
            height: h,
            ..TreeParams::default()
        }
    }

    fn sample_tree(k: usize, h: usize) -> ClarificationTree {
        let r = CountingRetriever(AtomicUsize::new(0));
        build_tree("My spouse wants a divorce", 1, &MockChat::default(), &r, &params(k, h), 7).unwrap()
    }

    #[test]
    fn node_index_examples() {
        assert_eq!(node_index(1, 1, 5).unwrap(), 1);
        assert_eq!(node_index(3, 2, 3).unwrap(), 6);
        assert_eq!(node_index(4, 8, 2).unwrap(), 15);
        assert!(node_index(2, 4, 3).is_err());
        assert!(node_index(2, 0, 3).is_err());
    }

    #[test]
    fn parent_and_position_invert_node_index() {
        for k in 2..=4 {
            for index in 1..=node_count(k, 4).unwrap() {
                let (h, p) = node_position(index, k).unwrap();
                assert_eq!(node_index(h, p, k).unwrap(), index);
                if let Some(parent) = parent_index(index, k).unwrap() {
                    let (ph, pp) = node_position(parent, k).unwrap();
                    assert_eq!(ph + 1, h);
                    assert!(((pp - 1) * k + 1..=pp * k).contains(&p));
                }
            }
        }
    }

    #[test]
    fn height_one_makes_no_calls() {
        let r = CountingRetriever(AtomicUsize::new(0));
        let chat = Fixed("unused", AtomicUsize::new(0));
        let tree = build_tree("q", 1, &chat, &r, &params(3, 1), 0).unwrap();
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(chat.1.load(Ordering::SeqCst), 0);
        assert_eq!(r.0.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn binary_tree_of_height_three() {
        let tree = sample_tree(2, 3);
        assert_eq!(tree.nodes().len(), 7);
        let sizes: Vec<usize> = (1..=3).map(|h| tree.layer(h).len()).collect();
        assert_eq!(sizes, vec![1, 2, 4]);
    }

    #[test]
    fn one_call_for_height_two() {
        let r = CountingRetriever(AtomicUsize::new(0));
        let chat = Fixed("1. a\n2. b\n3. c", AtomicUsize::new(0));
        build_tree("q", 1, &chat, &r, &params(3, 2), 0).unwrap();
        assert_eq!(chat.1.load(Ordering::SeqCst), 1);
        assert_eq!(r.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn unparsable_generation_fails_after_four_attempts() {
        let r = CountingRetriever(AtomicUsize::new(0));
        let chat = Fixed("I would rather not.", AtomicUsize::new(0));
        let err = build_tree("q", 1, &chat, &r, &params(3, 2), 0).unwrap_err();
        match err {
            Error::Generation { attempts, raw } => {
                assert_eq!(attempts, 4);
                assert_eq!(raw, "I would rather not.");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(chat.1.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn generated_text_comes_from_backend_replies() {
        let chat = RecordingChat {
            inner: MockChat::default(),
            replies: Mutex::new(Vec::new()),
        };
        let r = CountingRetriever(AtomicUsize::new(0));
        let tree = build_tree("q", 1, &chat, &r, &params(3, 3), 1).unwrap();
        let replies = chat.replies.lock().unwrap();
        for node in &tree.nodes()[1..] {
            assert!(matches!(node.provenance, Provenance::Backend { .. }));
            assert!(replies.iter().any(|r| r.contains(&node.text)));
        }
        assert_eq!(tree.root().provenance, Provenance::UserQuery);
        assert_eq!(tree.root().retrieved_case_ids, vec!["c0", "c1", "c2"]);
    }

    #[test]
    fn parser_accepts_common_markers_and_rejects_gaps() {
        assert_eq!(
            parse_numbered_list("Here you go:\n1) a\n2、b\n3: c", 3).unwrap(),
            vec!["a", "b", "c"]
        );
        assert!(parse_numbered_list("1. a\n3. c", 2).is_none());
        assert!(parse_numbered_list("1. a\n2. b", 3).is_none());
        assert!(parse_numbered_list("1. a\n2.", 2).is_none());
    }

    #[test]
    fn marks_partition_and_reject_root_or_unknown_nodes() {
        let tree = sample_tree(3, 2);
        let empty = tree.apply_marks(&Marks::new()).unwrap();
        assert_eq!(empty, VerifiedSet::root_only("My spouse wants a divorce"));

        let all: Marks = (2..=4).map(|i| (i, Mark::Yes)).collect();
        let v = tree.apply_marks(&all).unwrap();
        assert_eq!(v.affirmed.len(), 3);
        assert!(v.negated.is_empty());

        assert!(matches!(tree.apply_marks(&Marks::from([(1, Mark::Yes)])), Err(Error::Usage(_))));
        assert!(matches!(tree.apply_marks(&Marks::from([(5, Mark::No)])), Err(Error::Usage(_))));
    }

    #[test]
    fn marks_wire_format() {
        let marks: Marks = serde_json::from_str(r#"{"2":"yes","5":"no"}"#).unwrap();
        assert_eq!(marks, Marks::from([(2, Mark::Yes), (5, Mark::No)]));
        assert_eq!(serde_json::to_string(&marks).unwrap(), r#"{"2":"yes","5":"no"}"#);
    }

    #[test]
    fn composed_prompt_sections() {
        let root = compose_clarified_prompt(&VerifiedSet::root_only("q"));
        assert_eq!(root, "Client question: q");
        let v = VerifiedSet {
            root_query: "q".into(),
            affirmed: vec!["a".into(), "b".into()],
            negated: vec!["n".into()],
        };
        let p = compose_clarified_prompt(&v);
        assert!(p.contains(AFFIRMED_HEADER) && p.contains(NEGATED_HEADER));
        assert_eq!(p.lines().filter(|l| l.starts_with("- ")).count(), 3);
        assert_eq!(p, compose_clarified_prompt(&v));
    }

    #[test]
    fn view_has_parent_links_and_marks() {
        let tree = sample_tree(2, 3).with_marks(&Marks::from([(3, Mark::No)])).unwrap();
        let view = serde_json::to_value(tree.view()).unwrap();
        assert_eq!(view["K"], 2);
        assert_eq!(view["H"], 3);
        assert_eq!(view["nodes"][0]["parent_index"], serde_json::Value::Null);
        assert_eq!(view["nodes"][6]["parent_index"], 3);
        assert_eq!(view["nodes"][2]["mark"], "no");
        assert_eq!(view["nodes"][1]["mark"], "unmarked");
    }

    #[test]
    fn tree_serde_round_trip_and_validation() {
        let tree = sample_tree(3, 3);
        let json = serde_json::to_value(&tree).unwrap();
        let back: ClarificationTree = serde_json::from_value(json.clone()).unwrap();
        assert_eq!(back, tree);
        let mut broken = json;
        broken["nodes"].as_array_mut().unwrap().pop();
        assert!(serde_json::from_value::<ClarificationTree>(broken).is_err());
    }

    proptest! {
        #[test]
        fn all_yes_prompt_contains_every_question_once(k in 2usize..=4, h in 1usize..=3, seed in 0u64..1000) {
            let r = CountingRetriever(AtomicUsize::new(0));
            let tree = build_tree("root question", 1, &MockChat::default(), &r, &params(k, h), seed).unwrap();
            let marks: Marks = (2..=tree.nodes().len()).map(|i| (i, Mark::Yes)).collect();
            let prompt = compose_clarified_prompt(&tree.apply_marks(&marks).unwrap());
            for node in &tree.nodes()[1..] {
                prop_assert_eq!(prompt.matches(node.text.as_str()).count(), 1);
            }
        }
    }
}
