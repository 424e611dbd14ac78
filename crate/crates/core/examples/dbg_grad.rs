use invbench::classifiers::{ArchitectureConfig, ClassifierModel, RegimeTag};
use invbench::data::{ImageTensor, NormalizationSpec};
use invbench::nn::{init as nn_init, Layer, Sequential};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(rng: &mut ChaCha8Rng, seed: u64) -> ClassifierModel {
    use invbench::nn::act::Softplus;
    use invbench::nn::{Conv2d, GlobalAvgPool, Linear, Normalize};
    let body = Sequential::new(vec![
        Box::new(Normalize::new(NormalizationSpec::symmetric(3))) as Box<dyn Layer>,
        Box::new(Conv2d::new(nn_init::conv_he(rng, 6, 3, 3), None, 1, 1)),
        Box::new(Softplus::new()),
        Box::new(Conv2d::new(nn_init::conv_he(rng, 12, 6, 3), None, 2, 1)),
        Box::new(Softplus::new()),
        Box::new(GlobalAvgPool::new()),
    ]);
    let (w, b) = nn_init::linear_uniform(rng, 10, 12);
    let head = Sequential::new(vec![Box::new(Linear::new(w, b)) as Box<dyn Layer>]);
    ClassifierModel::from_networks(
        ArchitectureConfig::Custom { id: "g".into(), input_size: 10, num_classes: 10 },
        NormalizationSpec::symmetric(3), RegimeTag::Ttm, seed, body, head)
}

fn main() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut m = model(&mut rng, seed);
        let pixels = Array3::from_shape_fn((3, 10, 10), |_| rng.gen_range(3.0f32..252.0));
        let img = ImageTensor::new(pixels.clone()).unwrap();
        let class = rng.gen_range(0..10usize);
        let grad = m.input_gradient(&img, class).unwrap();
        for trial in 0..10 {
            let (c, y, x) = (rng.gen_range(0..3), rng.gen_range(0..10), rng.gen_range(0..10));
            for h in [0.5f32, 2.0, 4.0] {
                let mut up = pixels.clone(); up[[c,y,x]] += h;
                let mut dn = pixels.clone(); dn[[c,y,x]] -= h;
                let fp = m.class_activation(&ImageTensor::new(up).unwrap(), class).unwrap() as f64;
                let fm = m.class_activation(&ImageTensor::new(dn).unwrap(), class).unwrap() as f64;
                let fd = ((fp - fm) / (2.0 * h as f64)) as f32;
                let a = grad[[c, y, x]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(2e-5);
                if rel > 5e-4 {
                    println!("seed {seed} trial {trial} h={h}: a={a:+.6e} fd={fd:+.6e} rel={rel:.2e}");
                }
            }
        }
    }
}
