//! Output-shape rules for every differentiable operation.
//!
//! The concrete ops in [`crate::autodiff`] call these functions to validate
//! their inputs, so a shape computed here is exactly the shape the executed
//! op produces. Architecture-level shape planning (paper-scale conformance
//! checks) is built on top of the same rules without allocating any data.

use crate::error::{dim_err, Result};

pub type Shape = Vec<usize>;

pub fn same(a: &[usize], b: &[usize]) -> Result<Shape> {
    if a != b {
        return dim_err(format!("shape mismatch {a:?} vs {b:?}"));
    }
    Ok(a.to_vec())
}

pub fn conv2d(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Shape> {
    let [c, h, w] = *input else {
        return dim_err(format!("conv2d input must be C×H×W, got {input:?}"));
    };
    let [o, kc, kh, kw] = *kernel else {
        return dim_err(format!("conv2d kernel must be O×C×k×k, got {kernel:?}"));
    };
    if kc != c {
        return dim_err(format!(
            "conv2d kernel expects {kc} input channels, input has {c}"
        ));
    }
    if stride == 0 {
        return dim_err("conv2d stride must be positive");
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return dim_err(format!(
            "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * padding,
            w + 2 * padding
        ));
    }
    Ok(vec![
        o,
        (h + 2 * padding - kh) / stride + 1,
        (w + 2 * padding - kw) / stride + 1,
    ])
}

pub fn matmul(a: &[usize], b: &[usize]) -> Result<Shape> {
    match (a, b) {
        ([n, k1], [k2, m]) if k1 == k2 => Ok(vec![*n, *m]),
        _ => dim_err(format!("matmul shapes {a:?} × {b:?} incompatible")),
    }
}

pub fn bmm(a: &[usize], b: &[usize]) -> Result<Shape> {
    match (a, b) {
        ([b1, n, k1], [b2, k2, m]) if b1 == b2 && k1 == k2 => Ok(vec![*b1, *n, *m]),
        _ => dim_err(format!("batched matmul shapes {a:?} × {b:?} incompatible")),
    }
}

pub fn transpose(a: &[usize]) -> Result<Shape> {
    match a {
        [n, m] => Ok(vec![*m, *n]),
        _ => dim_err(format!("transpose needs a matrix, got {a:?}")),
    }
}

pub fn transpose_last2(a: &[usize]) -> Result<Shape> {
    match a {
        [b, n, m] => Ok(vec![*b, *m, *n]),
        _ => dim_err(format!("transpose_last2 needs rank 3, got {a:?}")),
    }
}

pub fn permute01(a: &[usize]) -> Result<Shape> {
    match a {
        [x, y, z] => Ok(vec![*y, *x, *z]),
        _ => dim_err(format!("permute01 needs rank 3, got {a:?}")),
    }
}

pub fn reshape(a: &[usize], target: &[usize]) -> Result<Shape> {
    if target.is_empty() || target.contains(&0) {
        return dim_err(format!("invalid reshape target {target:?}"));
    }
    if a.iter().product::<usize>() != target.iter().product::<usize>() {
        return dim_err(format!("cannot reshape {a:?} into {target:?}"));
    }
    Ok(target.to_vec())
}

/// `x: N×d` with a length-`d` vector broadcast across rows.
pub fn row_broadcast(x: &[usize], v: &[usize]) -> Result<Shape> {
    match (x, v) {
        ([_, d], [e]) if d == e => Ok(x.to_vec()),
        _ => dim_err(format!("row broadcast of {v:?} onto {x:?}")),
    }
}

/// `x: C×H×W` with a length-`C` vector broadcast over pixels.
pub fn channel_broadcast(x: &[usize], v: &[usize]) -> Result<Shape> {
    match (x, v) {
        ([c, _, _], [e]) if c == e => Ok(x.to_vec()),
        _ => dim_err(format!("channel broadcast of {v:?} onto {x:?}")),
    }
}

pub fn layer_norm(x: &[usize], gain: &[usize], bias: &[usize]) -> Result<Shape> {
    row_broadcast(x, gain)?;
    row_broadcast(x, bias)
}

pub fn concat_rows(parts: &[&[usize]]) -> Result<Shape> {
    let Some(first) = parts.first() else {
        return dim_err("concat of zero tensors");
    };
    let mut out = first.to_vec();
    for p in &parts[1..] {
        if p.len() != first.len() || p[1..] != first[1..] {
            return dim_err(format!("concat shapes {first:?} and {p:?} disagree"));
        }
        out[0] += p[0];
    }
    Ok(out)
}

pub fn concat_cols(parts: &[&[usize]]) -> Result<Shape> {
    let Some(first) = parts.first() else {
        return dim_err("concat of zero tensors");
    };
    let [n, _] = **first else {
        return dim_err(format!("column concat needs matrices, got {first:?}"));
    };
    let mut cols = 0;
    for p in parts {
        match **p {
            [pn, pc] if pn == n => cols += pc,
            _ => return dim_err(format!("column concat shapes {first:?} and {p:?}")),
        }
    }
    Ok(vec![n, cols])
}

pub fn slice_cols(x: &[usize], start: usize, len: usize) -> Result<Shape> {
    match x {
        [n, m] if len > 0 && start + len <= *m => Ok(vec![*n, len]),
        _ => dim_err(format!("column slice {start}..{} of {x:?}", start + len)),
    }
}

pub fn slice_rows(x: &[usize], start: usize, len: usize) -> Result<Shape> {
    match x.first() {
        Some(&n) if len > 0 && start + len <= n => {
            let mut out = x.to_vec();
            out[0] = len;
            Ok(out)
        }
        _ => dim_err(format!("row slice {start}..{} of {x:?}", start + len)),
    }
}

pub fn upsample(x: &[usize], factor: usize) -> Result<Shape> {
    match x {
        [c, h, w] if factor > 0 => Ok(vec![*c, h * factor, w * factor]),
        _ => dim_err(format!("upsample ×{factor} of {x:?}")),
    }
}

pub fn avg_pool(x: &[usize], factor: usize) -> Result<Shape> {
    match x {
        [c, h, w] if factor > 0 && h % factor == 0 && w % factor == 0 => {
            Ok(vec![*c, h / factor, w / factor])
        }
        _ => dim_err(format!("average pool /{factor} of {x:?}")),
    }
}

/// C×H×W feature map viewed as an (H·W)×C token matrix.
pub fn tokens(x: &[usize]) -> Result<Shape> {
    match x {
        [c, h, w] => Ok(vec![h * w, *c]),
        _ => dim_err(format!("token view needs C×H×W, got {x:?}")),
    }
}

pub fn heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(crate::Error::Config(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}
