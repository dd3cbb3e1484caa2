use advlab_core::attacks::AttackSpec;
use advlab_core::data::{generate_moving_shapes, Split};
use advlab_core::defense::{
    adversarial_train, train_benign, OptimSettings, ScheduleMode, TrainConfig,
};
use advlab_core::eval::{robust_accuracy, EvalPipeline};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let at_lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let at_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);

    let train = generate_moving_shapes(42, Split::Train, 100, 10, 16, 32, 32).unwrap();
    let val = generate_moving_shapes(42, Split::Val, 20, 10, 16, 32, 32).unwrap();
    let test = generate_moving_shapes(42, Split::Test, 20, 10, 16, 32, 32).unwrap();

    let t0 = Instant::now();
    let benign_cfg = TrainConfig {
        schedule: ScheduleMode::Constant,
        ..TrainConfig::standard(10, 1)
    };
    let benign = train_benign(&benign_cfg, &train, &val).unwrap();
    println!(
        "benign: {:.1}s, final val {:.3}",
        t0.elapsed().as_secs_f64(),
        benign.log.last().unwrap().val_acc
    );

    let t0 = Instant::now();
    let at_cfg = TrainConfig {
        optim: OptimSettings::sgd(at_lr, 1e-5),
        schedule: ScheduleMode::Constant,
        init: Some(benign.model.params().into_iter().cloned().collect()),
        ..TrainConfig::standard(at_epochs, 1)
    };
    let spec = AttackSpec::pgd(8.0, 8.0, steps);
    let at = adversarial_train(&at_cfg, &spec, &train, &val).unwrap();
    for e in &at.log {
        println!(
            "AT epoch {}: train {:.3} val {:.3} loss {:.4}",
            e.epoch, e.train_acc, e.val_acc, e.mean_loss
        );
    }
    println!("AT: {:.1}s", t0.elapsed().as_secs_f64());

    let specs = vec![
        AttackSpec::clean(),
        AttackSpec::pgd(8.0, 3.0, 5),
        AttackSpec::pgd(12.0, 4.0, 5),
    ];
    for (name, model) in [("benign", &benign.model), ("AT", &at.model)] {
        let pipe = EvalPipeline::bare(model);
        let report = robust_accuracy(&pipe, &test, &specs, 7).unwrap();
        print!("{name}:");
        for (l, a) in &report.entries {
            print!("  {l}={a:.3}");
        }
        println!();
    }
}
