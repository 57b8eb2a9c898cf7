//! Dense conv/fc forward and backward on small tensors.

use sgconv::tensor::{conv2d_backward, conv2d_forward, fc_forward, ConvWeights, FcWeights, Tensor};

fn main() -> sgconv::Result<()> {
    let x = Tensor::from_fn(vec![1, 2, 4, 4], |i| (i % 7) as f32 - 3.0);
    let w = ConvWeights::new(Tensor::from_fn(vec![3, 2, 3, 3], |i| ((i % 5) as f32 - 2.0) * 0.1), 1, 1)?;
    let bias = Tensor::new(vec![3], vec![0.5, 0.0, -0.5])?;
    let y = conv2d_forward(&x, &w, Some(&bias))?;
    println!("conv {:?} -> {:?}", x.shape(), y.shape());

    let upstream = Tensor::from_fn(y.shape().to_vec(), |_| 1.0);
    let g = conv2d_backward(&upstream, &x, &w)?;
    println!("dL/dw {:?}, dL/db = {:?}", g.weight.shape(), g.bias.data());

    let flat = y.reshape(vec![1, 48])?;
    let fc = FcWeights::new(Tensor::from_fn(vec![2, 48], |i| if i % 2 == 0 { 0.01 } else { -0.01 }))?;
    println!("fc logits {:?}", fc_forward(&flat, &fc, None)?.data());
    Ok(())
}
