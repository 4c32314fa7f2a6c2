//! Phylogenies, tree-structured Gaussian algebra and forward simulation.
//!
//! Tips of a rooted bifurcating tree carry Brownian latent traits. Under a
//! conjugate root prior the `n x q` tip matrix is matrix normal with row
//! covariance `V = Upsilon + J / kappa` and column covariance `Sigma`.
//! [`TreeGaussian`] evaluates `V^-1 Y` by one post-order and one pre-order
//! sweep (independent-contrast message passing) so hot loops never touch a
//! dense `n x n` matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::traits::{map_latent, LatentMatrix, ObservedTraits, TraitSpec};

/// Branch lengths below this are clamped when building the tree Gaussian.
pub const MIN_BRANCH_LENGTH: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Length of the branch to the parent (0 for the root).
    pub length: f64,
    pub label: Option<String>,
}

/// Rooted bifurcating tree with branch lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Phylogeny {
    nodes: Vec<Node>,
    root: usize,
    /// Node ids of the tips, in order of appearance.
    tips: Vec<usize>,
}

impl Phylogeny {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn tips(&self) -> &[usize] {
        &self.tips
    }

    pub fn n_tips(&self) -> usize {
        self.tips.len()
    }

    pub fn tip_labels(&self) -> Vec<String> {
        self.tips.iter().map(|&t| self.nodes[t].label.clone().unwrap_or_default()).collect()
    }

    /// Node ids with every child before its parent.
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded || self.nodes[v].children.is_empty() {
                out.push(v);
            } else {
                stack.push((v, true));
                for &c in self.nodes[v].children.iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }

    /// Distance from the root to every node.
    pub fn depths(&self) -> Vec<f64> {
        let mut depth = vec![0.0; self.nodes.len()];
        for v in self.postorder().into_iter().rev() {
            if let Some(p) = self.nodes[v].parent {
                depth[v] = depth[p] + self.nodes[v].length;
            }
        }
        depth
    }

    /// Multiplies every branch length by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for n in &mut out.nodes {
            n.length *= factor;
        }
        out
    }

    /// Random tree from the Kingman coalescent, rescaled to unit height.
    /// Tips are labelled `t1..tn`.
    pub fn random_coalescent<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument("a tree needs at least two tips".into()));
        }
        let mut nodes: Vec<Node> = (0..n)
            .map(|i| Node { parent: None, children: Vec::new(), length: 0.0, label: Some(format!("t{}", i + 1)) })
            .collect();
        let mut height = vec![0.0; n];
        let mut active: Vec<usize> = (0..n).collect();
        let mut t = 0.0;
        while active.len() > 1 {
            let k = active.len() as f64;
            t += Exp::new(k * (k - 1.0) / 2.0).unwrap().sample(rng);
            let a = active.swap_remove(rng.random_range(0..active.len()));
            let b = active.swap_remove(rng.random_range(0..active.len()));
            let id = nodes.len();
            nodes.push(Node { parent: None, children: vec![a, b], length: 0.0, label: None });
            height.push(t);
            for c in [a, b] {
                nodes[c].parent = Some(id);
                nodes[c].length = t - height[c];
            }
            active.push(id);
        }
        let root = active[0];
        for node in &mut nodes {
            node.length /= t;
        }
        let mut tree = Self { tips: Vec::new(), nodes, root };
        // tips in traversal order so that Newick output round-trips
        tree.tips = tree.postorder().into_iter().filter(|&v| tree.nodes[v].children.is_empty()).collect();
        for (k, &tip) in tree.tips.iter().enumerate() {
            tree.nodes[tip].label = Some(format!("t{}", k + 1));
        }
        Ok(tree)
    }

    /// Serializes to Newick with 17 significant digits.
    pub fn to_newick(&self) -> String {
        fn write(tree: &Phylogeny, v: usize, out: &mut String) {
            let node = &tree.nodes[v];
            if !node.children.is_empty() {
                out.push('(');
                for (i, &c) in node.children.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(tree, c, out);
                }
                out.push(')');
            }
            if let Some(l) = &node.label {
                out.push_str(l);
            }
            if node.parent.is_some() {
                out.push_str(&format!(":{:.17e}", node.length));
            }
        }
        let mut s = String::new();
        write(self, self.root, &mut s);
        s.push(';');
        s
    }
}

struct NewickParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    nodes: Vec<Node>,
    tips: Vec<usize>,
}

impl NewickParser<'_> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Newick { offset: self.pos, message: message.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn label(&mut self) -> Result<Option<String>> {
        match self.peek() {
            Some(b'\'') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\'' {
                    self.pos += 1;
                }
                if self.pos >= self.bytes.len() {
                    return self.err("unterminated quoted label");
                }
                let s = String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string();
                self.pos += 1;
                Ok(Some(s))
            }
            _ => {
                let start = self.pos;
                while self.pos < self.bytes.len() && !b":,();".contains(&self.bytes[self.pos]) {
                    self.pos += 1;
                }
                let s = String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string();
                Ok((!s.is_empty()).then_some(s))
            }
        }
    }

    fn length(&mut self) -> Result<Option<f64>> {
        if self.peek() != Some(b':') {
            return Ok(None);
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !b",();".contains(&self.bytes[self.pos]) && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(Some(v)),
            _ => {
                self.pos = start;
                self.err(format!("invalid branch length `{text}`"))
            }
        }
    }

    fn subtree(&mut self) -> Result<usize> {
        let id = self.nodes.len();
        self.nodes.push(Node { parent: None, children: Vec::new(), length: 0.0, label: None });
        if self.peek() == Some(b'(') {
            let open = self.pos;
            self.pos += 1;
            loop {
                let child = self.subtree()?;
                self.nodes[child].parent = Some(id);
                self.nodes[id].children.push(child);
                let at = self.pos;
                let Some(len) = self.length()? else {
                    self.pos = at;
                    return self.err("missing branch length");
                };
                self.nodes[child].length = len;
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return self.err("expected `,` or `)`"),
                }
            }
            let k = self.nodes[id].children.len();
            if k != 2 {
                let here = self.pos;
                self.pos = open;
                let msg = if k > 2 { format!("polytomy with {k} children") } else { "internal node with a single child".to_string() };
                let e = self.err(msg);
                self.pos = here;
                return e;
            }
            self.nodes[id].label = self.label()?;
        } else {
            let at = self.pos;
            match self.label()? {
                Some(l) => self.nodes[id].label = Some(l),
                None => {
                    self.pos = at;
                    return self.err("expected a tip label or `(`");
                }
            }
            self.tips.push(id);
        }
        Ok(id)
    }
}

/// Parses a rooted bifurcating Newick tree; every non-root edge needs a length.
pub fn parse_newick(text: &str) -> Result<Phylogeny> {
    let mut p = NewickParser { bytes: text.as_bytes(), pos: 0, nodes: Vec::new(), tips: Vec::new() };
    let root = p.subtree()?;
    // a root branch length is allowed and ignored
    p.length()?;
    if p.peek() != Some(b';') {
        return p.err("expected `;`");
    }
    p.pos += 1;
    if p.peek().is_some() {
        return p.err("trailing characters after `;`");
    }
    if p.tips.len() < 2 {
        return Err(Error::Newick { offset: 0, message: "a tree needs at least two tips".into() });
    }
    p.nodes[root].length = 0.0;
    let mut seen = std::collections::HashSet::new();
    for &t in &p.tips {
        let l = p.nodes[t].label.as_deref().unwrap_or("");
        if !seen.insert(l) {
            return Err(Error::Newick { offset: 0, message: format!("duplicate tip label `{l}`") });
        }
    }
    Ok(Phylogeny { nodes: p.nodes, root, tips: p.tips })
}

/// Shared-path matrix `Upsilon` by explicit path enumeration.
pub fn diffusion_matrix(phylo: &Phylogeny) -> DMatrix<f64> {
    let n = phylo.n_tips();
    let depth = phylo.depths();
    let ancestors: Vec<Vec<usize>> = phylo
        .tips()
        .iter()
        .map(|&t| {
            let mut path = vec![t];
            let mut v = t;
            while let Some(p) = phylo.nodes[v].parent {
                path.push(p);
                v = p;
            }
            path
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return depth[phylo.tips[i]];
        }
        // deepest common ancestor
        let set: std::collections::HashSet<usize> = ancestors[j].iter().copied().collect();
        let mrca = ancestors[i].iter().copied().find(|a| set.contains(a)).unwrap();
        depth[mrca]
    })
}

/// Across-taxa covariance `V = Upsilon + J / kappa`, checked to be positive definite.
pub fn tree_covariance(phylo: &Phylogeny, kappa: f64) -> Result<DMatrix<f64>> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    let v = diffusion_matrix(phylo).add_scalar(1.0 / kappa);
    if v.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("tree covariance (degenerate branch lengths?)".into()));
    }
    Ok(v)
}

/// Per-internal-node quantities of the contrast recursion.
#[derive(Debug, Clone)]
struct Contrast {
    node: usize,
    left: usize,
    right: usize,
    /// Effective branch variances of the two children.
    s_left: f64,
    s_right: f64,
    /// Variance of the node's partial mean.
    v: f64,
    /// Variance of the contrast `m_left - m_right`.
    w: f64,
}

/// Tree-structured matrix-normal machinery with cached factorizations.
#[derive(Debug, Clone)]
pub struct TreeGaussian {
    phylo: Phylogeny,
    kappa: f64,
    /// Row index of each tip node (`usize::MAX` for internal nodes).
    tip_row: Vec<usize>,
    contrasts: Vec<Contrast>,
    root_variance: f64,
    logdet_v: f64,
    v_inv: DMatrix<f64>,
}

impl TreeGaussian {
    pub fn new(phylo: &Phylogeny, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
        }
        let mut phylo = phylo.clone();
        let mut clamped = 0;
        let root = phylo.root;
        for (i, node) in phylo.nodes.iter_mut().enumerate() {
            if i != root && node.length < MIN_BRANCH_LENGTH {
                node.length = MIN_BRANCH_LENGTH;
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} branch length(s) to {MIN_BRANCH_LENGTH}");
        }
        let n_nodes = phylo.nodes.len();
        let mut tip_row = vec![usize::MAX; n_nodes];
        for (r, &t) in phylo.tips.iter().enumerate() {
            tip_row[t] = r;
        }
        let mut var = vec![0.0; n_nodes];
        let mut contrasts = Vec::with_capacity(phylo.n_tips() - 1);
        for v in phylo.postorder() {
            let node = &phylo.nodes[v];
            if node.children.is_empty() {
                continue;
            }
            let (l, r) = (node.children[0], node.children[1]);
            let s_left = var[l] + phylo.nodes[l].length;
            let s_right = var[r] + phylo.nodes[r].length;
            var[v] = 1.0 / (1.0 / s_left + 1.0 / s_right);
            contrasts.push(Contrast { node: v, left: l, right: r, s_left, s_right, v: var[v], w: s_left + s_right });
        }
        let root_variance = var[phylo.root] + 1.0 / kappa;
        let logdet_v = contrasts.iter().map(|c| c.w.ln()).sum::<f64>() + root_variance.ln();
        let dense = diffusion_matrix(&phylo).add_scalar(1.0 / kappa);
        let chol = dense
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("tree covariance".into()))?;
        let v_inv = chol.inverse();
        Ok(Self { phylo, kappa, tip_row, contrasts, root_variance, logdet_v, v_inv })
    }

    pub fn phylogeny(&self) -> &Phylogeny {
        &self.phylo
    }

    pub fn n(&self) -> usize {
        self.phylo.n_tips()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn logdet_v(&self) -> f64 {
        self.logdet_v
    }

    /// Dense `V^-1`, built once at construction.
    pub fn v_inv(&self) -> &DMatrix<f64> {
        &self.v_inv
    }

    /// Partial means of every node for a residual matrix `y` (`n x q`, row-major).
    fn partial_means(&self, y: &[f64], q: usize) -> Vec<f64> {
        let n_nodes = self.phylo.nodes.len();
        let mut m = vec![0.0; n_nodes * q];
        for (node, &row) in self.tip_row.iter().enumerate() {
            if row != usize::MAX {
                m[node * q..(node + 1) * q].copy_from_slice(&y[row * q..(row + 1) * q]);
            }
        }
        for c in &self.contrasts {
            let (a, b) = (c.v / c.s_left, c.v / c.s_right);
            for j in 0..q {
                m[c.node * q + j] = a * m[c.left * q + j] + b * m[c.right * q + j];
            }
        }
        m
    }

    /// `V^-1 Y` in `O(n q)` by a post-order then pre-order sweep.
    pub fn v_inv_times(&self, y: &[f64], q: usize, out: &mut [f64]) {
        let m = self.partial_means(y, q);
        let n_nodes = self.phylo.nodes.len();
        let mut adj = vec![0.0; n_nodes * q];
        let root = self.phylo.root;
        for j in 0..q {
            adj[root * q + j] = m[root * q + j] / self.root_variance;
        }
        for c in self.contrasts.iter().rev() {
            let (a, b) = (c.v / c.s_left, c.v / c.s_right);
            for j in 0..q {
                let g = (m[c.left * q + j] - m[c.right * q + j]) / c.w;
                let up = adj[c.node * q + j];
                adj[c.left * q + j] = a * up + g;
                adj[c.right * q + j] = b * up - g;
            }
        }
        for (node, &row) in self.tip_row.iter().enumerate() {
            if row != usize::MAX {
                out[row * q..(row + 1) * q].copy_from_slice(&adj[node * q..(node + 1) * q]);
            }
        }
    }

    /// `Y^T V^-1 Y` (`q x q`, row-major) from the contrasts.
    pub fn quadratic_form(&self, y: &[f64], q: usize) -> Vec<f64> {
        let m = self.partial_means(y, q);
        let mut s = vec![0.0; q * q];
        let mut u = vec![0.0; q];
        let mut accumulate = |u: &[f64], w: f64| {
            for a in 0..q {
                let ua = u[a] / w;
                for b in a..q {
                    s[a * q + b] += ua * u[b];
                }
            }
        };
        for c in &self.contrasts {
            for j in 0..q {
                u[j] = m[c.left * q + j] - m[c.right * q + j];
            }
            accumulate(&u, c.w);
        }
        let root = self.phylo.root;
        accumulate(&m[root * q..(root + 1) * q], self.root_variance);
        for a in 0..q {
            for b in 0..a {
                s[a * q + b] = s[b * q + a];
            }
        }
        s
    }

    /// Matrix-normal precision product `V^-1 (X - M) Sigma^-1`, i.e. `Phi (x - mu)`
    /// for the row-major vectorization.
    pub fn precision_product(&self, resid: &[f64], sigma_inv: &[f64], q: usize, out: &mut [f64]) {
        let n = self.n();
        let mut tmp = vec![0.0; n * q];
        self.v_inv_times(resid, q, &mut tmp);
        right_multiply(&tmp, sigma_inv, n, q, out);
    }

    /// Adds `scale * Phi e_(a,b)` to `out`, where `Phi = V^-1 (x) Sigma^-1`.
    pub fn add_precision_column(&self, a: usize, b: usize, sigma_inv: &[f64], q: usize, scale: f64, out: &mut [f64]) {
        let col = self.v_inv.column(a);
        let srow = &sigma_inv[b * q..(b + 1) * q];
        for (o, &c) in out.chunks_exact_mut(q).zip(col.iter()) {
            let f = scale * c;
            if f == 0.0 {
                continue;
            }
            for (o, &s) in o.iter_mut().zip(srow) {
                *o += f * s;
            }
        }
    }

    /// Column of the joint precision at flat index `(a, b)`, materialized as `n x q`.
    pub fn precision_column(&self, a: usize, b: usize, sigma_inv: &[f64], q: usize) -> Result<Vec<f64>> {
        let n = self.n();
        if a >= n {
            return Err(Error::OutOfRange { index: a, dim: n });
        }
        if b >= q {
            return Err(Error::OutOfRange { index: b, dim: q });
        }
        let mut out = vec![0.0; n * q];
        self.add_precision_column(a, b, sigma_inv, q, 1.0, &mut out);
        Ok(out)
    }

    /// `log MN(X; M, V, Sigma)` given `resid = X - M` and a Cholesky factor of `Sigma`.
    pub fn matrix_normal_logdensity(&self, resid: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
        let q = sigma.nrows();
        let n = self.n();
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("trait covariance".into()))?;
        let logdet_sigma = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let s = DMatrix::from_row_slice(q, q, &self.quadratic_form(resid, q));
        let trace = chol.solve(&s).trace();
        let nq = (n * q) as f64;
        Ok(-0.5 * nq * (2.0 * std::f64::consts::PI).ln() - 0.5 * q as f64 * self.logdet_v - 0.5 * n as f64 * logdet_sigma - 0.5 * trace)
    }
}

/// `out = a * b` with `a` `n x q` and `b` `q x q`, both row-major.
pub(crate) fn right_multiply(a: &[f64], b: &[f64], n: usize, q: usize, out: &mut [f64]) {
    for i in 0..n {
        let row = &a[i * q..(i + 1) * q];
        let o = &mut out[i * q..(i + 1) * q];
        o.fill(0.0);
        for (k, &r) in row.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let brow = &b[k * q..(k + 1) * q];
            for j in 0..q {
                o[j] += r * brow[j];
            }
        }
    }
}

/// Dense matrix-normal log-density; used where no tree is available.
pub fn matrix_normal_logdensity(x: &DMatrix<f64>, m: &DMatrix<f64>, v: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let (n, q) = x.shape();
    if m.shape() != (n, q) || v.shape() != (n, n) || sigma.shape() != (q, q) {
        return Err(Error::InvalidArgument("matrix-normal dimensions disagree".into()));
    }
    let cv = v.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("row covariance".into()))?;
    let cs = sigma.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("column covariance".into()))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let r = x - m;
    let a = cv.solve(&r);
    let quad = (cs.solve(&r.transpose()) * a).trace();
    Ok(-0.5 * (n * q) as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * q as f64 * logdet(&cv.l()) - 0.5 * n as f64 * logdet(&cs.l()) - 0.5 * quad)
}

/// Forward-simulates Brownian latents down the tree and thresholds them.
///
/// The root is drawn from `N(mu0, Sigma / kappa)` and each child from
/// `N(parent, t Sigma)`. Returns the tip latents (tip order) and the
/// observed traits they imply.
pub fn simulate_traits<R: Rng + ?Sized>(
    phylo: &Phylogeny,
    sigma: &DMatrix<f64>,
    mu0: &[f64],
    kappa: f64,
    spec: &TraitSpec,
    rng: &mut R,
) -> Result<(LatentMatrix, ObservedTraits)> {
    let q = sigma.nrows();
    if mu0.len() != q || spec.layout().q != q {
        return Err(Error::InvalidArgument("mu0 / spec / sigma dimensions disagree".into()));
    }
    let l = psd_factor(sigma)?;
    let mut value = vec![DVector::zeros(q); phylo.nodes.len()];
    let draw = |scale: f64, rng: &mut R| -> DVector<f64> {
        let z = DVector::from_fn(q, |_, _| StandardNormal.sample(rng));
        (&l * z) * scale.sqrt()
    };
    for v in phylo.postorder().into_iter().rev() {
        value[v] = match phylo.nodes[v].parent {
            None => DVector::from_column_slice(mu0) + draw(1.0 / kappa, rng),
            Some(p) => {
                let t = phylo.nodes[v].length;
                if t > 0.0 { &value[p] + draw(t, rng) } else { value[p].clone() }
            }
        };
    }
    let rows: Vec<Vec<f64>> = phylo.tips().iter().map(|&t| value[t].iter().copied().collect()).collect();
    let x = LatentMatrix::from_rows(&rows);
    let values = rows.iter().map(|r| map_latent(r, spec)).collect::<Result<Vec<_>>>()?;
    Ok((x, ObservedTraits { taxa: phylo.tip_labels(), values }))
}

/// Lower factor `L` with `L L^T = A` for positive semi-definite `A`.
fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = a.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&e| e < -1e-10 * eig.eigenvalues.amax().max(1.0)) {
        return Err(Error::NotPositiveDefinite("covariance is not PSD".into()));
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt)
}
