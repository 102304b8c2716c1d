//! Break the evidential objective into its terms and check its gradient.

use priornet::numerics::Tensor;
use priornet::objective::{combined_loss, evidence_and_alpha, loss_gradient, run_gradcheck, uncertainty_weight, LossHyperParams};

fn main() -> priornet::Result<()> {
    let hyper = LossHyperParams::default();
    let logits = Tensor::from_rows(&[&[2.0, -1.0, 0.5, 0.0], &[-3.0, -3.0, -3.0, -3.0], &[9.0, 0.0, 0.0, 0.0]])?;
    let labels = [0, 1, 0];
    for (i, row) in (0..logits.rows()).map(|i| (i, logits.row(i))) {
        let params = evidence_and_alpha(row, hyper.evidence_cap);
        println!("sample {i}: evidence {:.3?}, uncertainty {:.3}", params.evidence, uncertainty_weight(&params));
    }
    let loss = combined_loss(&logits, &labels, &hyper)?;
    println!(
        "data {:.4}  kl {:.4}  henn {:.4}  ufce {:.4}  ce {:.4}  total {:.4}",
        loss.data_term, loss.kl_term, loss.henn, loss.ufce, loss.ce, loss.total
    );
    let grad = loss_gradient(&logits, &labels, &hyper)?;
    println!("∂L/∂z row 2 (evidence capped on class 0): {:.4?}", grad.row(2));

    let report = run_gradcheck(100, 0)?;
    println!("gradcheck: {report:?}");
    Ok(())
}
