//! Kernel expression trees, their PCFG prior, parameter transforms, and
//! the tree-surgery primitives used by structure proposals.
//!
//! A kernel expression is a binary tree whose leaves are base kernels and
//! whose internal nodes combine children pointwise by `+` or `*`. Parameters
//! are stored separately from the structure, as a flat vector indexed in
//! depth-first left-to-right leaf order. That ordering is the canonical
//! contract shared by the model, the HMC gradients and serialization.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base kernel families. The list is extensible; arity is fixed per tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseKernelKind {
    /// `alpha + (x - w)^T (x' - w)`, parameters (alpha, w).
    Linear,
    /// `exp(-|x - x'|^2 / (2 l^2))`, parameter (l).
    SquaredExp,
    /// `exp(-(|x - x'| / l)^gamma)`, parameters (l, gamma).
    GammaExp,
}

impl BaseKernelKind {
    pub const ALL: [BaseKernelKind; 3] = [
        BaseKernelKind::Linear,
        BaseKernelKind::SquaredExp,
        BaseKernelKind::GammaExp,
    ];

    /// Number of real-valued parameters carried by a leaf of this kind.
    pub fn arity(self) -> usize {
        match self {
            BaseKernelKind::Linear => 2,
            BaseKernelKind::SquaredExp => 1,
            BaseKernelKind::GammaExp => 2,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            BaseKernelKind::Linear => "LIN",
            BaseKernelKind::SquaredExp => "SE",
            BaseKernelKind::GammaExp => "GE",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        match tok {
            "LIN" => Some(BaseKernelKind::Linear),
            "SE" => Some(BaseKernelKind::SquaredExp),
            "GE" => Some(BaseKernelKind::GammaExp),
            _ => None,
        }
    }

    fn transforms(self) -> &'static [Transform] {
        match self {
            // alpha > 0, w unconstrained
            BaseKernelKind::Linear => &[Transform::Exp, Transform::Identity],
            // l > 0
            BaseKernelKind::SquaredExp => &[Transform::Exp],
            // l > 0, 0 < gamma < 2
            BaseKernelKind::GammaExp => &[Transform::Exp, Transform::ZeroTwo],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineOp {
    Sum,
    Product,
}

impl CombineOp {
    pub fn token(self) -> &'static str {
        match self {
            CombineOp::Sum => "+",
            CombineOp::Product => "*",
        }
    }
}

/// Step taken from a composite node to one of its children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChildSide {
    Left,
    Right,
}

/// Path from the root to a subtree; empty path addresses the root.
pub type TreePath = Vec<ChildSide>;

/// A kernel structure: structure only, parameters live in a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelExpression {
    Leaf(BaseKernelKind),
    Composite {
        op: CombineOp,
        left: Box<KernelExpression>,
        right: Box<KernelExpression>,
    },
}

impl KernelExpression {
    pub fn sum(left: KernelExpression, right: KernelExpression) -> Self {
        KernelExpression::Composite {
            op: CombineOp::Sum,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn product(left: KernelExpression, right: KernelExpression) -> Self {
        KernelExpression::Composite {
            op: CombineOp::Product,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Tree depth; a single leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            KernelExpression::Leaf(_) => 1,
            KernelExpression::Composite { left, right, .. } => {
                1 + left.depth().max(right.depth())
            }
        }
    }

    /// Total number of real-valued parameters, in canonical leaf order.
    pub fn param_dim(&self) -> usize {
        match self {
            KernelExpression::Leaf(kind) => kind.arity(),
            KernelExpression::Composite { left, right, .. } => {
                left.param_dim() + right.param_dim()
            }
        }
    }

    /// Per-coordinate constraint transforms in canonical order.
    pub fn transforms(&self) -> Vec<Transform> {
        let mut out = Vec::with_capacity(self.param_dim());
        self.collect_transforms(&mut out);
        out
    }

    fn collect_transforms(&self, out: &mut Vec<Transform>) {
        match self {
            KernelExpression::Leaf(kind) => out.extend_from_slice(kind.transforms()),
            KernelExpression::Composite { left, right, .. } => {
                left.collect_transforms(out);
                right.collect_transforms(out);
            }
        }
    }

    /// Leaf kinds in canonical (depth-first left-to-right) order.
    pub fn leaf_kinds(&self) -> Vec<BaseKernelKind> {
        let mut out = Vec::new();
        fn walk(e: &KernelExpression, out: &mut Vec<BaseKernelKind>) {
            match e {
                KernelExpression::Leaf(kind) => out.push(*kind),
                KernelExpression::Composite { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }

    pub fn subtree_at(&self, path: &[ChildSide]) -> Result<&KernelExpression> {
        let mut node = self;
        for step in path {
            match node {
                KernelExpression::Leaf(_) => return Err(Error::InvalidPath(path.to_vec())),
                KernelExpression::Composite { left, right, .. } => {
                    node = match step {
                        ChildSide::Left => left,
                        ChildSide::Right => right,
                    };
                }
            }
        }
        Ok(node)
    }
}

impl std::fmt::Display for KernelExpression {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelExpression::Leaf(kind) => write!(f, "{}", kind.token()),
            KernelExpression::Composite { op, left, right } => {
                write!(f, "({} {} {})", left, op.token(), right)
            }
        }
    }
}

/// Parses the parenthesized text form, e.g. `(LIN + (SE * GE))`.
/// A bare leaf may be written `LIN` or `(LIN)`.
pub fn parse_kernel(input: &str) -> Result<KernelExpression> {
    let tokens = tokenize(input)?;
    let mut pos = 0;
    let expr = parse_expr(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::KernelParse(format!(
            "trailing input after expression in {input:?}"
        )));
    }
    Ok(expr)
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open,
    Close,
    Op(CombineOp),
    Leaf(BaseKernelKind),
}

fn tokenize(input: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut chars = input.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            '(' => {
                tokens.push(Token::Open);
                chars.next();
            }
            ')' => {
                tokens.push(Token::Close);
                chars.next();
            }
            '+' => {
                tokens.push(Token::Op(CombineOp::Sum));
                chars.next();
            }
            '*' | 'x' | '×' => {
                tokens.push(Token::Op(CombineOp::Product));
                chars.next();
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            c if c.is_ascii_alphabetic() => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphabetic() {
                        word.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                let kind = BaseKernelKind::from_token(&word)
                    .ok_or_else(|| Error::KernelParse(format!("unknown base kernel {word:?}")))?;
                tokens.push(Token::Leaf(kind));
            }
            other => {
                return Err(Error::KernelParse(format!("unexpected character {other:?}")));
            }
        }
    }
    Ok(tokens)
}

fn parse_expr(tokens: &[Token], pos: &mut usize) -> Result<KernelExpression> {
    match tokens.get(*pos) {
        Some(Token::Leaf(kind)) => {
            *pos += 1;
            Ok(KernelExpression::Leaf(*kind))
        }
        Some(Token::Open) => {
            *pos += 1;
            let left = parse_expr(tokens, pos)?;
            match tokens.get(*pos) {
                Some(Token::Close) => {
                    *pos += 1;
                    Ok(left)
                }
                Some(Token::Op(op)) => {
                    let op = *op;
                    *pos += 1;
                    let right = parse_expr(tokens, pos)?;
                    match tokens.get(*pos) {
                        Some(Token::Close) => {
                            *pos += 1;
                            Ok(KernelExpression::Composite {
                                op,
                                left: Box::new(left),
                                right: Box::new(right),
                            })
                        }
                        _ => Err(Error::KernelParse("expected ')'".into())),
                    }
                }
                _ => Err(Error::KernelParse("expected operator or ')'".into())),
            }
        }
        _ => Err(Error::KernelParse("expected leaf or '('".into())),
    }
}

// ---------------------------------------------------------------------------
// PCFG prior
// ---------------------------------------------------------------------------

/// Production probabilities of the kernel grammar, with a hard depth cap.
/// At `max_depth` the leaf production is forced, which makes the prior
/// proper and enumerable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcfgConfig {
    pub p_leaf: f64,
    pub p_sum: f64,
    pub p_product: f64,
    /// Categorical weights over `BaseKernelKind::ALL`, same order.
    pub base_weights: Vec<f64>,
    pub max_depth: usize,
}

impl Default for PcfgConfig {
    fn default() -> Self {
        PcfgConfig {
            p_leaf: 0.5,
            p_sum: 0.25,
            p_product: 0.25,
            base_weights: vec![1.0 / 3.0; 3],
            max_depth: 4,
        }
    }
}

impl PcfgConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_leaf, self.p_sum, self.p_product];
        if probs.iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("production probabilities must be > 0".into()));
        }
        if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("p_leaf + p_sum + p_product must be 1".into()));
        }
        if self.base_weights.len() != BaseKernelKind::ALL.len() {
            return Err(Error::Config(format!(
                "expected {} base kernel weights",
                BaseKernelKind::ALL.len()
            )));
        }
        if self.base_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("base weights must be nonnegative".into()));
        }
        if (self.base_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("base weights must sum to 1".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be positive".into()));
        }
        Ok(())
    }

    fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R) -> BaseKernelKind {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (kind, &w) in BaseKernelKind::ALL.iter().zip(&self.base_weights) {
            acc += w;
            if u < acc {
                return *kind;
            }
        }
        *BaseKernelKind::ALL.last().unwrap()
    }
}

/// Draws a kernel structure from the PCFG prior. Depth never exceeds
/// `pcfg.max_depth`.
pub fn sample_kernel<R: Rng + ?Sized>(pcfg: &PcfgConfig, rng: &mut R) -> KernelExpression {
    sample_kernel_with_budget(pcfg, pcfg.max_depth, rng)
}

/// Draws a subtree with at most `budget` remaining depth levels. The leaf
/// production is forced at budget 1 (depth-cap renormalization).
pub fn sample_kernel_with_budget<R: Rng + ?Sized>(
    pcfg: &PcfgConfig,
    budget: usize,
    rng: &mut R,
) -> KernelExpression {
    assert!(budget >= 1);
    if budget == 1 {
        return KernelExpression::Leaf(pcfg.sample_base(rng));
    }
    let u: f64 = rng.random();
    if u < pcfg.p_leaf {
        KernelExpression::Leaf(pcfg.sample_base(rng))
    } else {
        let op = if u < pcfg.p_leaf + pcfg.p_sum {
            CombineOp::Sum
        } else {
            CombineOp::Product
        };
        let left = sample_kernel_with_budget(pcfg, budget - 1, rng);
        let right = sample_kernel_with_budget(pcfg, budget - 1, rng);
        KernelExpression::Composite {
            op,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Exact log of the product of production probabilities generating `k`,
/// with the depth-cap renormalization applied.
pub fn kernel_log_prior(k: &KernelExpression, pcfg: &PcfgConfig) -> Result<f64> {
    kernel_log_prior_with_budget(k, pcfg, pcfg.max_depth)
}

/// Log PCFG probability of `k` as a subtree with `budget` remaining levels.
pub fn kernel_log_prior_with_budget(
    k: &KernelExpression,
    pcfg: &PcfgConfig,
    budget: usize,
) -> Result<f64> {
    if k.depth() > budget {
        return Err(Error::DepthExceeded {
            depth: k.depth(),
            max_depth: budget,
        });
    }
    Ok(log_prior_rec(k, pcfg, budget))
}

fn log_prior_rec(k: &KernelExpression, pcfg: &PcfgConfig, budget: usize) -> f64 {
    match k {
        KernelExpression::Leaf(kind) => {
            let idx = BaseKernelKind::ALL.iter().position(|x| x == kind).unwrap();
            let w = pcfg.base_weights[idx].ln();
            if budget == 1 {
                w // leaf production forced at the cap
            } else {
                pcfg.p_leaf.ln() + w
            }
        }
        KernelExpression::Composite { op, left, right } => {
            let p_op = match op {
                CombineOp::Sum => pcfg.p_sum,
                CombineOp::Product => pcfg.p_product,
            };
            p_op.ln()
                + log_prior_rec(left, pcfg, budget - 1)
                + log_prior_rec(right, pcfg, budget - 1)
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter transforms
// ---------------------------------------------------------------------------

/// Bijection from an unconstrained coordinate to the constrained space of a
/// single kernel parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// `z -> exp(z)`, for positive parameters.
    Exp,
    /// `z -> z`, for unconstrained parameters.
    Identity,
    /// `z -> 2 / (1 + exp(z))`, for parameters in (0, 2).
    ZeroTwo,
}

impl Transform {
    pub fn forward(self, z: f64) -> f64 {
        match self {
            Transform::Exp => z.exp(),
            Transform::Identity => z,
            Transform::ZeroTwo => 2.0 / (1.0 + z.exp()),
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            Transform::Exp => v.ln(),
            Transform::Identity => v,
            Transform::ZeroTwo => (2.0 / v - 1.0).ln(),
        }
    }

    /// d(constrained)/d(unconstrained) at `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Transform::Exp => z.exp(),
            Transform::Identity => 1.0,
            Transform::ZeroTwo => {
                let s = 1.0 / (1.0 + z.exp());
                -2.0 * s * (1.0 - s)
            }
        }
    }

    pub fn log_abs_det_jacobian(self, z: f64) -> f64 {
        self.derivative(z).abs().ln()
    }
}

/// Kernel parameters in constrained space, canonical leaf order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedParams(pub Vec<f64>);

impl ConstrainedParams {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Maps unconstrained parameters to constrained space per each coordinate's
/// constraint.
pub fn transform_params(k: &KernelExpression, theta_u: &[f64]) -> Result<ConstrainedParams> {
    let transforms = k.transforms();
    if theta_u.len() != transforms.len() {
        return Err(Error::ParamLength {
            expected: transforms.len(),
            got: theta_u.len(),
        });
    }
    Ok(ConstrainedParams(
        transforms
            .iter()
            .zip(theta_u)
            .map(|(t, &z)| t.forward(z))
            .collect(),
    ))
}

/// Inverse of [`transform_params`].
pub fn inverse_transform_params(k: &KernelExpression, constrained: &[f64]) -> Result<Vec<f64>> {
    let transforms = k.transforms();
    if constrained.len() != transforms.len() {
        return Err(Error::ParamLength {
            expected: transforms.len(),
            got: constrained.len(),
        });
    }
    Ok(transforms
        .iter()
        .zip(constrained)
        .map(|(t, &v)| t.inverse(v))
        .collect())
}

/// Log-abs-determinant of the Jacobian of [`transform_params`] at `theta_u`.
pub fn transform_log_abs_det_jacobian(k: &KernelExpression, theta_u: &[f64]) -> Result<f64> {
    let transforms = k.transforms();
    if theta_u.len() != transforms.len() {
        return Err(Error::ParamLength {
            expected: transforms.len(),
            got: theta_u.len(),
        });
    }
    Ok(transforms
        .iter()
        .zip(theta_u)
        .map(|(t, &z)| t.log_abs_det_jacobian(z))
        .sum())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluates `k` pointwise at a pair of feature vectors.
pub fn eval_kernel(
    k: &KernelExpression,
    params: &ConstrainedParams,
    x: &[f64],
    x2: &[f64],
) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::DimensionMismatch(format!(
            "feature vectors have lengths {} and {}",
            x.len(),
            x2.len()
        )));
    }
    if params.len() != k.param_dim() {
        return Err(Error::ParamLength {
            expected: k.param_dim(),
            got: params.len(),
        });
    }
    Ok(eval_rec(k, params.as_slice(), x, x2))
}

fn eval_rec(k: &KernelExpression, params: &[f64], x: &[f64], x2: &[f64]) -> f64 {
    match k {
        KernelExpression::Leaf(kind) => eval_base(*kind, params, x, x2),
        KernelExpression::Composite { op, left, right } => {
            let split = left.param_dim();
            let a = eval_rec(left, &params[..split], x, x2);
            let b = eval_rec(right, &params[split..], x, x2);
            match op {
                CombineOp::Sum => a + b,
                CombineOp::Product => a * b,
            }
        }
    }
}

fn sq_dist(x: &[f64], x2: &[f64]) -> f64 {
    x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn eval_base(kind: BaseKernelKind, p: &[f64], x: &[f64], x2: &[f64]) -> f64 {
    match kind {
        BaseKernelKind::Linear => {
            let (alpha, w) = (p[0], p[1]);
            alpha + x.iter().zip(x2).map(|(a, b)| (a - w) * (b - w)).sum::<f64>()
        }
        BaseKernelKind::SquaredExp => {
            let l = p[0];
            (-sq_dist(x, x2) / (2.0 * l * l)).exp()
        }
        BaseKernelKind::GammaExp => {
            let (l, gamma) = (p[0], p[1]);
            let r = sq_dist(x, x2).sqrt();
            (-(r / l).powf(gamma)).exp()
        }
    }
}

/// Evaluates `k` and its gradient with respect to the constrained parameters.
/// `grad` must have length `k.param_dim()`.
pub fn eval_kernel_grad(
    k: &KernelExpression,
    params: &[f64],
    x: &[f64],
    x2: &[f64],
    grad: &mut [f64],
) -> f64 {
    debug_assert_eq!(params.len(), k.param_dim());
    debug_assert_eq!(grad.len(), k.param_dim());
    match k {
        KernelExpression::Leaf(kind) => eval_base_grad(*kind, params, x, x2, grad),
        KernelExpression::Composite { op, left, right } => {
            let split = left.param_dim();
            let (pl, pr) = params.split_at(split);
            let (gl, gr) = grad.split_at_mut(split);
            let a = eval_kernel_grad(left, pl, x, x2, gl);
            let b = eval_kernel_grad(right, pr, x, x2, gr);
            match op {
                CombineOp::Sum => a + b,
                CombineOp::Product => {
                    for g in gl.iter_mut() {
                        *g *= b;
                    }
                    for g in gr.iter_mut() {
                        *g *= a;
                    }
                    a * b
                }
            }
        }
    }
}

fn eval_base_grad(kind: BaseKernelKind, p: &[f64], x: &[f64], x2: &[f64], grad: &mut [f64]) -> f64 {
    match kind {
        BaseKernelKind::Linear => {
            let w = p[1];
            let v = eval_base(kind, p, x, x2);
            grad[0] = 1.0;
            grad[1] = x.iter().zip(x2).map(|(a, b)| 2.0 * w - a - b).sum();
            v
        }
        BaseKernelKind::SquaredExp => {
            let l = p[0];
            let d2 = sq_dist(x, x2);
            let v = (-d2 / (2.0 * l * l)).exp();
            grad[0] = v * d2 / (l * l * l);
            v
        }
        BaseKernelKind::GammaExp => {
            let (l, gamma) = (p[0], p[1]);
            let r = sq_dist(x, x2).sqrt();
            if r == 0.0 {
                grad[0] = 0.0;
                grad[1] = 0.0;
                return 1.0;
            }
            let q = (r / l).powf(gamma);
            let v = (-q).exp();
            grad[0] = v * gamma * q / l;
            grad[1] = -v * q * (r / l).ln();
            v
        }
    }
}

/// Gram matrix with entry `(i, j) = k(X_i, X2_j)`.
pub fn gram_matrix(
    k: &KernelExpression,
    params: &ConstrainedParams,
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x.ncols() != x2.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "feature matrices have widths {} and {}",
            x.ncols(),
            x2.ncols()
        )));
    }
    if params.len() != k.param_dim() {
        return Err(Error::ParamLength {
            expected: k.param_dim(),
            got: params.len(),
        });
    }
    let (n, m) = (x.nrows(), x2.nrows());
    let mut out = DMatrix::zeros(n, m);
    let xr: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let x2r: Vec<Vec<f64>> = (0..m).map(|j| x2.row(j).iter().copied().collect()).collect();
    for i in 0..n {
        for j in 0..m {
            out[(i, j)] = eval_rec(k, params.as_slice(), &xr[i], &x2r[j]);
        }
    }
    Ok(out)
}

/// Symmetric Gram matrix over `x` together with one gradient matrix per
/// constrained parameter.
pub fn gram_with_grad(
    k: &KernelExpression,
    params: &ConstrainedParams,
    x: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    if params.len() != k.param_dim() {
        return Err(Error::ParamLength {
            expected: k.param_dim(),
            got: params.len(),
        });
    }
    let n = x.nrows();
    let p = params.len();
    let mut value = DMatrix::zeros(n, n);
    let mut grads = vec![DMatrix::zeros(n, n); p];
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let mut g = vec![0.0; p];
    for i in 0..n {
        for j in i..n {
            let v = eval_kernel_grad(k, params.as_slice(), &rows[i], &rows[j], &mut g);
            value[(i, j)] = v;
            value[(j, i)] = v;
            for (q, &gq) in g.iter().enumerate() {
                grads[q][(i, j)] = gq;
                grads[q][(j, i)] = gq;
            }
        }
    }
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// Tree surgery
// ---------------------------------------------------------------------------

/// Maps each parameter slot of a surgically produced tree back to the slot
/// it occupied before surgery; `None` marks a slot belonging to a freshly
/// generated leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRemap {
    pub map: Vec<Option<usize>>,
}

impl ParamRemap {
    /// Carries surviving parameter values over and fills fresh slots from
    /// `fresh`.
    pub fn apply(&self, old: &[f64], mut fresh: impl FnMut() -> f64) -> Vec<f64> {
        self.map
            .iter()
            .map(|slot| match slot {
                Some(i) => old[*i],
                None => fresh(),
            })
            .collect()
    }
}

/// All subtree paths of `k` in depth-first preorder; the first entry is the
/// root (empty path).
pub fn list_subtrees(k: &KernelExpression) -> Vec<TreePath> {
    let mut out = Vec::new();
    fn walk(e: &KernelExpression, prefix: &mut TreePath, out: &mut Vec<TreePath>) {
        out.push(prefix.clone());
        if let KernelExpression::Composite { left, right, .. } = e {
            prefix.push(ChildSide::Left);
            walk(left, prefix, out);
            prefix.pop();
            prefix.push(ChildSide::Right);
            walk(right, prefix, out);
            prefix.pop();
        }
    }
    walk(k, &mut Vec::new(), &mut out);
    out
}

// Tree with leaves tagged by their old parameter offset (None = fresh),
// used to track parameter identity through surgery.
#[derive(Clone)]
enum Tagged {
    Leaf(BaseKernelKind, Option<usize>),
    Composite(CombineOp, Box<Tagged>, Box<Tagged>),
}

impl Tagged {
    fn from_expr(e: &KernelExpression, offset: &mut usize, fresh: bool) -> Tagged {
        match e {
            KernelExpression::Leaf(kind) => {
                let tag = if fresh {
                    None
                } else {
                    let start = *offset;
                    *offset += kind.arity();
                    Some(start)
                };
                Tagged::Leaf(*kind, tag)
            }
            KernelExpression::Composite { op, left, right } => {
                let l = Tagged::from_expr(left, offset, fresh);
                let r = Tagged::from_expr(right, offset, fresh);
                Tagged::Composite(*op, Box::new(l), Box::new(r))
            }
        }
    }

    fn linearize(&self) -> (KernelExpression, ParamRemap) {
        let mut map = Vec::new();
        let expr = self.linearize_rec(&mut map);
        (expr, ParamRemap { map })
    }

    fn linearize_rec(&self, map: &mut Vec<Option<usize>>) -> KernelExpression {
        match self {
            Tagged::Leaf(kind, tag) => {
                for i in 0..kind.arity() {
                    map.push(tag.map(|start| start + i));
                }
                KernelExpression::Leaf(*kind)
            }
            Tagged::Composite(op, left, right) => {
                let l = left.linearize_rec(map);
                let r = right.linearize_rec(map);
                KernelExpression::Composite {
                    op: *op,
                    left: Box::new(l),
                    right: Box::new(r),
                }
            }
        }
    }

    fn at_path_mut(&mut self, path: &[ChildSide]) -> Option<&mut Tagged> {
        let mut node = self;
        for step in path {
            match node {
                Tagged::Leaf(..) => return None,
                Tagged::Composite(_, left, right) => {
                    node = match step {
                        ChildSide::Left => left,
                        ChildSide::Right => right,
                    };
                }
            }
        }
        Some(node)
    }

    fn depth(&self) -> usize {
        match self {
            Tagged::Leaf(..) => 1,
            Tagged::Composite(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }
}

/// Replaces the subtree at `path` by `replacement`. The original tree is
/// unmodified; surviving leaves keep their parameter slots via the returned
/// remap and `replacement`'s slots come back as fresh.
pub fn replace_subtree(
    k: &KernelExpression,
    path: &[ChildSide],
    replacement: &KernelExpression,
    max_depth: usize,
) -> Result<(KernelExpression, ParamRemap)> {
    k.subtree_at(path)?;
    let mut tagged = Tagged::from_expr(k, &mut 0, false);
    let fresh = Tagged::from_expr(replacement, &mut 0, true);
    *tagged
        .at_path_mut(path)
        .ok_or_else(|| Error::InvalidPath(path.to_vec()))? = fresh;
    if tagged.depth() > max_depth {
        return Err(Error::DepthExceeded {
            depth: tagged.depth(),
            max_depth,
        });
    }
    Ok(tagged.linearize())
}

/// Detaches the subtree at `detach_path` (its sibling is promoted into the
/// parent's place) and reattaches it at `attach_path` of the reduced tree,
/// forming a new composite with the detached subtree's original parent
/// operator. `attach_side` selects which child the detached subtree becomes.
pub fn detach_reattach(
    k: &KernelExpression,
    detach_path: &[ChildSide],
    attach_path: &[ChildSide],
    attach_side: ChildSide,
    max_depth: usize,
) -> Result<(KernelExpression, ParamRemap)> {
    if detach_path.is_empty() {
        return Err(Error::InvalidPath(detach_path.to_vec()));
    }
    k.subtree_at(detach_path)?;
    let mut tagged = Tagged::from_expr(k, &mut 0, false);

    let (parent_path, last) = detach_path.split_at(detach_path.len() - 1);
    let parent = tagged
        .at_path_mut(parent_path)
        .ok_or_else(|| Error::InvalidPath(detach_path.to_vec()))?;
    let (op, detached, sibling) = match parent {
        Tagged::Composite(op, left, right) => {
            let op = *op;
            match last[0] {
                ChildSide::Left => (op, (**left).clone(), (**right).clone()),
                ChildSide::Right => (op, (**right).clone(), (**left).clone()),
            }
        }
        Tagged::Leaf(..) => return Err(Error::InvalidPath(detach_path.to_vec())),
    };
    *parent = sibling;

    let target = tagged
        .at_path_mut(attach_path)
        .ok_or_else(|| Error::InvalidPath(attach_path.to_vec()))?;
    let existing = target.clone();
    *target = match attach_side {
        ChildSide::Left => Tagged::Composite(op, Box::new(detached), Box::new(existing)),
        ChildSide::Right => Tagged::Composite(op, Box::new(existing), Box::new(detached)),
    };

    if tagged.depth() > max_depth {
        return Err(Error::DepthExceeded {
            depth: tagged.depth(),
            max_depth,
        });
    }
    Ok(tagged.linearize())
}

/// JSON-facing summary of one kernel hypothesis, used in run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelReport {
    pub structure: String,
    pub params: Vec<f64>,
    pub log_prior: f64,
}

impl KernelReport {
    pub fn new(k: &KernelExpression, params: &ConstrainedParams, pcfg: &PcfgConfig) -> Result<Self> {
        Ok(KernelReport {
            structure: k.to_string(),
            params: params.0.clone(),
            log_prior: kernel_log_prior(k, pcfg)?,
        })
    }
}
