from collections import defaultdict


class Accumulator:
    """Counters (iterations, seconds, sizes) collected over several solves."""
    def __init__(self):
        self.metrics = defaultdict(lambda: 0.)

    def add(self, key, value):
        self.metrics[key] += value

    def maximum(self, key, value):
        self.metrics[key] = max(self.metrics[key], value) if key in self.metrics else value

    def __getitem__(self, item):
        return self.metrics[item]

    def __contains__(self, item):
        return self.metrics.__contains__(item)

    def items(self):
        return self.metrics.items()


class SummaryWriterDummy:
    def __init__(self, log_dir=None):
        pass

    def add_scalar(self, *args, **kwargs):
        pass

    def close(self):
        pass


def get_writer(log_dir):
    if not log_dir:
        return SummaryWriterDummy()
    from tensorboardX import SummaryWriter
    return SummaryWriter(log_dir=log_dir)
