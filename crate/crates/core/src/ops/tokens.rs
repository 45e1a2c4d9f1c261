//! Layout changes between spatial `[C,H,W,D]` tensors and `[N,C]` token
//! matrices (N = H·W·D, tokens in row-major (h,w,d) order).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_token_matrix(spatial: &Tensor) -> Result<Tensor> {
    if spatial.rank() != 4 {
        return Err(Error::shape(format!(
            "expected [C,H,W,D], got {:?}",
            spatial.shape()
        )));
    }
    let c = spatial.shape()[0];
    let n: usize = spatial.shape()[1..].iter().product();
    let x = spatial.data();
    let mut out = vec![0.0; n * c];
    for ci in 0..c {
        let src = &x[ci * n..(ci + 1) * n];
        for (t, &v) in src.iter().enumerate() {
            out[t * c + ci] = v;
        }
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn from_token_matrix(tokens: &Tensor, extents: [usize; 3]) -> Result<Tensor> {
    if tokens.rank() != 2 {
        return Err(Error::shape(format!(
            "expected [N,C], got {:?}",
            tokens.shape()
        )));
    }
    let n: usize = extents.iter().product();
    if tokens.shape()[0] != n {
        return Err(Error::shape(format!(
            "token count {} does not match extents {extents:?}",
            tokens.shape()[0]
        )));
    }
    let c = tokens.shape()[1];
    let x = tokens.data();
    let mut out = vec![0.0; n * c];
    for ci in 0..c {
        let dst = &mut out[ci * n..(ci + 1) * n];
        for (t, d) in dst.iter_mut().enumerate() {
            *d = x[t * c + ci];
        }
    }
    Tensor::from_vec(&[c, extents[0], extents[1], extents[2]], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rng_tensor(&mut rng, &[3, 2, 4, 5]);
        let t = to_token_matrix(&x).unwrap();
        assert_eq!(t.shape(), &[40, 3]);
        let back = from_token_matrix(&t, [2, 4, 5]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn token_order_is_row_major_over_hwd() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let t = to_token_matrix(&x).unwrap();
        assert_eq!(t.data(), &[10.0, 11.0, 12.0, 13.0]);
    }
}
