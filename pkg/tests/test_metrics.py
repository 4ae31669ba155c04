import os

from ContractPricing.metrics import Accumulator, SummaryWriterDummy, get_writer


def test_accumulator_sums_and_keeps_maxima():
    acc = Accumulator()
    acc.add('iterations', 12)
    acc.add('iterations', 8)
    acc.maximum('accuracy', 1e-9)
    acc.maximum('accuracy', 1e-7)
    acc.maximum('accuracy', 1e-8)
    assert acc['iterations'] == 20
    assert acc['accuracy'] == 1e-7
    assert 'variables' not in acc
    assert dict(acc.items()) == dict(iterations=20, accuracy=1e-7)


def test_writer_without_directory_is_a_dummy():
    writer = get_writer(None)
    assert isinstance(writer, SummaryWriterDummy)
    writer.add_scalar('nlp/objective', 1., 0)
    writer.close()


def test_writer_logs_to_directory(tmp_path):
    writer = get_writer(str(tmp_path / 'tb'))
    writer.add_scalar('epec/c_pen', 1e-7, 0)
    writer.close()
    assert os.listdir(tmp_path / 'tb')
