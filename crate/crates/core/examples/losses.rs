//! Distillation losses on hand-made distributions, and the same quantities
//! computed on the tape with gradients.
//!
//!     cargo run --example losses

use std::sync::Arc;

use askd::losses::{
    akd_loss, graph_kl, kl_loss, skd_loss, skd_target, soft_ce_loss, softmax_temperature, ProbDist,
};
use askd::numkernel::{Graph, Tensor};

fn main() -> askd::Result<()> {
    let tau = 2.0;
    let teacher_logits = Tensor::from_rows(&[vec![3.0, 1.0, 0.2, -1.0], vec![0.1, 2.5, 0.0, 0.3]])?;
    let student_logits = Tensor::from_rows(&[vec![1.0, 1.2, 0.0, 0.0], vec![0.0, 1.0, 0.5, 0.5]])?;
    let p_t = softmax_temperature(&teacher_logits, tau)?;
    let p_s = softmax_temperature(&student_logits, tau)?;
    let y = ProbDist::one_hot(&[0, 1], 4)?;

    println!("teacher at tau={tau}: {:.3?}", p_t.row(0));
    println!("KL(teacher || student)  {:.5}", kl_loss(&p_t, &p_s, tau)?);
    println!("l_akd at alpha 0.7      {:.5}", akd_loss(&p_s, &p_t, 0.7, tau)?);

    let p_s1 = softmax_temperature(&student_logits, 1.0)?;
    println!("hard-label CE           {:.5}", soft_ce_loss(&y, &p_s1)?);
    for alpha in [0.0, 0.4, 0.8] {
        let target = skd_target(&y, &p_s1, alpha)?;
        println!(
            "SKD alpha {alpha:.1}: target row 0 {:.3?}, loss {:.5}",
            target.row(0),
            skd_loss(&y, &p_s1, &p_s1, alpha)?
        );
    }

    let mut g = Graph::new();
    let z = g.leaf(student_logits, true)?;
    let kl = graph_kl(&mut g, z, Arc::new(p_t.into_tensor()), tau, 2.0)?;
    g.backward(kl)?;
    println!("\ngraph KL {:.5}, d/dz row 0 {:.4?}", g.value(kl).item(), &g.grad(z).unwrap().row(0));
    Ok(())
}
