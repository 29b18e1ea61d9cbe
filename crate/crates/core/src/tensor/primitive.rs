use super::{ConvGeom, Result, Scalar, Tensor, TensorError};

/// The primitive operations networks are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Matmul,
    Add,
    Scale,
    Relu,
    Conv2d,
    Maxpool2x2,
    GlobalAvgPool,
    BatchNorm,
    ConcatLastAxis,
    MeanRows,
    SoftmaxXent,
    Reshape,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 12] = [
        Self::Matmul,
        Self::Add,
        Self::Scale,
        Self::Relu,
        Self::Conv2d,
        Self::Maxpool2x2,
        Self::GlobalAvgPool,
        Self::BatchNorm,
        Self::ConcatLastAxis,
        Self::MeanRows,
        Self::SoftmaxXent,
        Self::Reshape,
    ];

    /// Number of tensor inputs.
    pub fn arity(self) -> usize {
        match self {
            Self::Matmul | Self::Add | Self::Conv2d | Self::ConcatLastAxis => 2,
            Self::BatchNorm => 3,
            _ => 1,
        }
    }
}

/// Non-tensor arguments. Only the fields a kind reads matter.
#[derive(Clone, Debug)]
pub struct PrimitiveAttrs {
    pub factor: f64,
    pub conv: ConvGeom,
    pub eps: f64,
    pub labels: Vec<usize>,
    pub shape: Vec<usize>,
}

impl Default for PrimitiveAttrs {
    fn default() -> Self {
        Self { factor: 1.0, conv: ConvGeom::default(), eps: 1e-5, labels: Vec::new(), shape: Vec::new() }
    }
}

/// Applies one primitive, recording it if any input is on a recording tape.
///
/// | kind | inputs | result |
/// |---|---|---|
/// | matmul | `(m,k)`, `(k,n)` | `(m,n)` |
/// | add | two tensors of equal shape | same shape |
/// | scale | any | `factor · x` |
/// | relu | any | same shape |
/// | conv2d | `(B,C,H,W)`, `(O,C,kh,kw)` | `(B,O,H',W')` per `conv` |
/// | maxpool2x2 | `(B,C,H,W)` | `(B,C,⌊H/2⌋,⌊W/2⌋)` |
/// | global_avg_pool | `(B,C,H,W)` | `(B,C)` |
/// | batch_norm | `(B≥2,C,...)`, `γ (C)`, `β (C)` | same as input |
/// | concat_last_axis | `(B,n₁)`, `(B,n₂)` | `(B,n₁+n₂)` |
/// | mean_rows | `(B,n)` | `(n)` |
/// | softmax_xent | `(B,n)` logits, `labels` | scalar mean loss |
/// | reshape | any | `shape` |
pub fn apply_primitive<T: Scalar>(kind: PrimitiveKind, inputs: &[&Tensor<T>], attrs: &PrimitiveAttrs) -> Result<Tensor<T>> {
    if inputs.len() != kind.arity() {
        return Err(TensorError::InvalidArgument {
            op: "apply_primitive",
            msg: format!("{kind:?} takes {} inputs, got {}", kind.arity(), inputs.len()),
        });
    }
    let x = inputs[0];
    match kind {
        PrimitiveKind::Matmul => x.matmul(inputs[1]),
        PrimitiveKind::Add => x.add(inputs[1]),
        PrimitiveKind::Scale => x.scale(T::of_f64(attrs.factor)),
        PrimitiveKind::Relu => x.relu(),
        PrimitiveKind::Conv2d => x.conv2d(inputs[1], attrs.conv),
        PrimitiveKind::Maxpool2x2 => x.maxpool2x2(),
        PrimitiveKind::GlobalAvgPool => x.global_avg_pool(),
        PrimitiveKind::BatchNorm => x.batch_norm(inputs[1], inputs[2], T::of_f64(attrs.eps)),
        PrimitiveKind::ConcatLastAxis => x.concat_cols(inputs[1]),
        PrimitiveKind::MeanRows => x.mean_rows(),
        PrimitiveKind::SoftmaxXent => x.softmax_xent(&attrs.labels),
        PrimitiveKind::Reshape => x.reshape(&attrs.shape),
    }
}
