use askd::evalkit::{evaluate, greedy_decode, strip_eos};
use askd::model::{Decoder, EncoderConfig, FrozenEncoder, ModelConfig, ModelSnapshot};
use askd::numkernel::{Optimizer, OptimizerKind};
use askd::taskgen::{gen_dataset, Split, TaskSpec};
use askd::trainer::{run_epoch_ce, Corpus, RunData};

fn corpus(spec: &TaskSpec, n: usize, split: Split) -> Corpus {
    let encoder = FrozenEncoder::new(EncoderConfig::default()).unwrap();
    Corpus::encode(gen_dataset(spec, n, split).unwrap(), &encoder).unwrap()
}

#[test]
fn noiseless_one_frame_per_token_task_is_learnt() {
    let spec = TaskSpec {
        noise_std: 0.0,
        min_frames_per_token: 1,
        max_frames_per_token: 1,
        ..TaskSpec::default()
    };
    // Inverting the lookup needs more than the default 2000 utterances to
    // generalise over repeated tokens.
    let train = corpus(&spec, 8000, Split::Pretrain);
    let val = corpus(&spec, 100, Split::Val);
    let test = corpus(&spec, 100, Split::Test);
    let data = RunData {
        train: &train,
        val: &val,
        val_limit: 0,
    };
    let mut student = Decoder::new(ModelConfig::student()).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.3);
    let mut best = (f64::INFINITY, ModelSnapshot::capture(&student, 0));
    for epoch in 0..8 {
        let ter = run_epoch_ce(&mut student, &mut opt, &data, epoch, 8, 0).unwrap().val_ter;
        if ter < best.0 {
            best = (ter, ModelSnapshot::capture(&student, epoch));
        }
        if ter == 0.0 {
            break;
        }
    }
    let student = best.1.restore(&ModelConfig::student()).unwrap();
    let ter = evaluate(&student, &test, 0, "ce", "test").unwrap().wer;
    assert!(ter < 0.01, "test TER {ter}");
}

#[test]
fn overfit_model_decodes_its_training_utterance() {
    let train = corpus(&TaskSpec::default(), 1, Split::Train);
    let data = RunData {
        train: &train,
        val: &train,
        val_limit: 0,
    };
    let mut student = Decoder::new(ModelConfig::student()).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.3);
    for epoch in 0..300 {
        if run_epoch_ce(&mut student, &mut opt, &data, epoch, 1, 0).unwrap().val_ter == 0.0 {
            break;
        }
    }
    let hyp = greedy_decode(&student, &train.features[0], 16).unwrap();
    assert_eq!(strip_eos(&hyp), train.utts[0].content());
    assert_eq!(hyp.last(), Some(&askd::model::EOS));
}
