use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::{sign, Scalar};

/// 1-bit weights (bit 1 is +1, bit 0 is -1) backed by float shadow weights
/// that the optimizer updates.
///
/// Bits are packed least significant bit first within each byte.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryWeights<T> {
    shape: Vec<usize>,
    bits: Vec<u8>,
    latent: Tensor<T>,
}

impl<T: Scalar> BinaryWeights<T> {
    pub fn from_latent(latent: Tensor<T>) -> Self {
        let mut latent = latent;
        if !latent.requires_grad() {
            let shape = latent.shape().to_vec();
            latent = Tensor::parameter(&shape, latent.into_data()).expect("same shape");
        }
        let bits = pack(latent.data());
        Self {
            shape: latent.shape().to_vec(),
            bits,
            latent,
        }
    }

    /// Rebuilds weights from packed bits; the shadow weights become the
    /// unpacked signs.
    pub fn from_bits(shape: &[usize], bits: Vec<u8>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if bits.len() != packed_len(len) {
            return Err(shape_err(
                "binary weights",
                format!("{} values need {} bytes, got {}", len, packed_len(len), bits.len()),
            ));
        }
        let latent = Tensor::parameter(shape, unpack(&bits, len))?;
        Ok(Self {
            shape: shape.to_vec(),
            bits,
            latent,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn packed_bytes(&self) -> usize {
        self.bits.len()
    }

    /// The ±1 values the forward pass uses.
    pub fn signs(&self) -> Vec<T> {
        unpack(&self.bits, self.len())
    }

    pub fn latent(&self) -> &Tensor<T> {
        &self.latent
    }

    pub fn latent_mut(&mut self) -> &mut Tensor<T> {
        &mut self.latent
    }

    /// Straight-through gradient for the shadow weights: the gradient with
    /// respect to the binarized value, cancelled where |latent| > 1.
    pub fn accumulate_sign_grad(&mut self, grad_signs: &[T]) {
        let one = T::one();
        let masked: Vec<T> = grad_signs
            .iter()
            .zip(self.latent.data())
            .map(|(&g, &w)| if w.abs() <= one { g } else { T::zero() })
            .collect();
        self.latent.accumulate_grad(&masked);
    }

    /// Clips the shadow weights to [-1, 1] and repacks the signs. Called
    /// after every optimizer update.
    pub fn rebinarize(&mut self) {
        let one = T::one();
        for w in self.latent.data_mut() {
            *w = w.max(-one).min(one);
        }
        self.bits = pack(self.latent.data());
    }
}

pub fn packed_len(values: usize) -> usize {
    values.div_ceil(8)
}

pub fn pack<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut bits = vec![0u8; packed_len(values.len())];
    for (i, &v) in values.iter().enumerate() {
        if sign(v) > T::zero() {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    bits
}

pub fn unpack<T: Scalar>(bits: &[u8], len: usize) -> Vec<T> {
    (0..len)
        .map(|i| {
            if bits[i / 8] >> (i % 8) & 1 == 1 {
                T::one()
            } else {
                -T::one()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn packed_length_rounds_up() {
        assert_eq!(packed_len(108), 14);
        assert_eq!(packed_len(8), 1);
        assert_eq!(packed_len(9), 2);
        assert_eq!(packed_len(0), 0);
    }

    #[test]
    fn from_bits_rejects_wrong_length() {
        assert!(BinaryWeights::<f32>::from_bits(&[2, 5], vec![0u8; 1]).is_err());
        assert!(BinaryWeights::<f32>::from_bits(&[2, 5], vec![0u8; 2]).is_ok());
    }

    #[test]
    fn rebinarize_clips_shadow_weights() {
        let latent = Tensor::parameter(&[3], vec![2.5f32, -0.2, -4.0]).unwrap();
        let mut w = BinaryWeights::from_latent(latent);
        w.rebinarize();
        assert_eq!(w.latent().data(), &[1.0, -0.2, -1.0]);
        assert_eq!(w.signs(), vec![1.0, -1.0, -1.0]);
    }

    #[test]
    fn sign_grad_is_cancelled_outside_unit_interval() {
        let latent = Tensor::parameter(&[3], vec![0.5f64, 1.5, -1.0]).unwrap();
        let mut w = BinaryWeights::from_latent(latent);
        w.accumulate_sign_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(w.latent().grad().unwrap(), &[1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn pack_unpack_is_bijective(signs in proptest::collection::vec(any::<bool>(), 0..200)) {
            let values: Vec<f32> = signs.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();
            let bits = pack(&values);
            prop_assert_eq!(bits.len(), packed_len(values.len()));
            prop_assert_eq!(unpack::<f32>(&bits, values.len()), values.clone());
            let w = BinaryWeights::<f32>::from_bits(&[values.len()], bits.clone()).unwrap();
            prop_assert!(w.signs().iter().all(|v| *v == 1.0 || *v == -1.0));
            prop_assert_eq!(pack(&w.signs()), bits);
        }
    }
}
