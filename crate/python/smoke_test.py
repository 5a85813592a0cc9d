"""Smoke test for the spiketim extension module."""

import math
import os
import tempfile

import spiketim


def main():
    cfg = spiketim.ModelConfig("paper_scale")
    tim = cfg.param_count()
    cfg.mode = "local_tim"
    assert cfg.param_count() == tim, "tim and local_tim counts differ"
    assert abs(tim - 2.59e6) / 2.59e6 < 0.10
    print("paper-scale parameters:", tim)

    assert spiketim.cosine_lr(0, 100) == 0.005
    assert math.isclose(spiketim.cosine_lr(50, 100), 0.0025)

    spikes = spiketim.lif([0.8] * 50, [50, 1])
    assert set(spikes) == {0.0}
    spikes = spiketim.lif([2.0, 0.5, 3.0], [3, 1])
    assert spikes == [1.0, 0.0, 1.0], spikes

    streams = spiketim.synth_temporal_order(samples=120, seed=1)
    a = streams[0]
    assert spiketim.EventStream.from_evs1(a.to_evs1()) == a
    assert a.to_evs1() == spiketim.EventStream.from_evs1(a.to_evs1()).to_evs1()
    values, shape = a.bin(10, 8, 8)
    assert shape == [10, 2, 8, 8] and sum(values) == len(a)
    try:
        spiketim.EventStream.from_evs1(b"NOPE")
    except ValueError as e:
        print("bad file rejected:", e)
    else:
        raise AssertionError("corrupt EVS1 accepted")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "a.evs1")
        a.write(path)
        assert spiketim.EventStream.read(path) == a

        desk = spiketim.ModelConfig("desk")
        data = spiketim.Dataset.from_streams(streams, desk.time_steps, desk.height, desk.width)
        train, val = data.split(0.8, 0)
        oracle = spiketim.order_blind_oracle(train, val)
        print("order-blind oracle:", oracle)

        model = spiketim.Model(desk, 0)
        (x, xshape), labels = val.batch([0, 1, 2])
        logits, lshape = model.logits(x, xshape)
        assert lshape == [3, 2] and all(math.isfinite(v) for v in logits)

        trainer = spiketim.Trainer(desk, seed=0, epochs=2)
        losses = [trainer.train_epoch(train) for _ in range(2)]
        acc, confusion = trainer.evaluate(val)
        assert sum(map(sum, confusion)) == len(val)
        print("losses:", losses, "val acc:", acc)
        ck = os.path.join(d, "t.ckpt")
        trainer.save(ck)
        again = spiketim.Trainer.load(ck, epochs=2)
        assert again.epoch == 2
        assert again.checkpoint_bytes() == trainer.checkpoint_bytes()

    report = spiketim.gradcheck(max_coords=3)
    assert report["passed"] and report["spike_backward_exact"], report["failures"]
    for name, g in report["groups"].items():
        print(f"{name}: worst {g['worst_error']:.2e} at {g['worst_path']}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
