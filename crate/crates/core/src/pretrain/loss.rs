use super::PretrainError;
use crate::tensor::Var;

/// Mean over anchors `i` of `-log softmax_j(cos(a_i, b_j) / τ)[i]`; the
/// positive of anchor `i` is row `i` of `b`, the other rows are negatives.
pub fn info_nce<'g>(a: &Var<'g>, b: &Var<'g>, tau: f64) -> Result<Var<'g>, PretrainError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(PretrainError::CountMismatch {
            left: sa.first().copied().unwrap_or(0),
            right: sb.first().copied().unwrap_or(0),
        });
    }
    let n = sa[0];
    if n == 0 {
        return Err(PretrainError::CountMismatch { left: 0, right: 0 });
    }
    let logits = a.cosine_matrix(b)?.scale(1.0 / tau);
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    Ok(logits.log_softmax_last().gather_flat(&diag)?.mean().neg())
}

/// Graph-anchored cross-modal loss: graph `i` against all texts in the batch.
pub fn cross_modal_loss<'g>(
    z_g: &Var<'g>,
    z_t: &Var<'g>,
    tau: f64,
) -> Result<Var<'g>, PretrainError> {
    info_nce(z_g, z_t, tau)
}

/// Graph-modal NT-Xent: `z_g[i]` against the augmented views `z_g_aug[j]`.
pub fn intra_graph_loss<'g>(
    z_g: &Var<'g>,
    z_g_aug: &Var<'g>,
    tau: f64,
) -> Result<Var<'g>, PretrainError> {
    info_nce(z_g, z_g_aug, tau)
}

/// Projected embeddings of one batch: two graph views and two sentences per
/// sample.
pub struct BatchViews<'g> {
    pub z_g: Var<'g>,
    pub z_g_aug: Var<'g>,
    pub z_t: Var<'g>,
    pub z_t_aug: Var<'g>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossFlags {
    pub tau: f64,
    pub symmetric: bool,
    pub intra_text: bool,
}

/// Term names in the order [`total_pretrain_loss`] reports them.
pub const BASE_TERMS: [&str; 5] = ["g_t", "gaug_t", "g_taug", "gaug_taug", "intra_graph"];

/// Unweighted sum of the four cross-modal terms and the intra-graph term,
/// plus the text-anchored and intra-text terms when enabled.
pub fn total_pretrain_loss<'g>(
    v: &BatchViews<'g>,
    flags: LossFlags,
) -> Result<(Var<'g>, Vec<(&'static str, Var<'g>)>), PretrainError> {
    let tau = flags.tau;
    let pairs = [
        (&v.z_g, &v.z_t),
        (&v.z_g_aug, &v.z_t),
        (&v.z_g, &v.z_t_aug),
        (&v.z_g_aug, &v.z_t_aug),
    ];
    let mut terms = Vec::new();
    for (name, (g, t)) in BASE_TERMS.iter().zip(pairs) {
        terms.push((*name, cross_modal_loss(g, t, tau)?));
    }
    terms.push(("intra_graph", intra_graph_loss(&v.z_g, &v.z_g_aug, tau)?));
    if flags.symmetric {
        const SYM: [&str; 4] = ["t_g", "t_gaug", "taug_g", "taug_gaug"];
        for (name, (g, t)) in SYM.iter().zip(pairs) {
            terms.push((*name, info_nce(t, g, tau)?));
        }
    }
    if flags.intra_text {
        terms.push(("intra_text", info_nce(&v.z_t, &v.z_t_aug, tau)?));
    }
    let mut total = terms[0].1;
    for (_, t) in &terms[1..] {
        total = total.add(t)?;
    }
    Ok((total, terms))
}
