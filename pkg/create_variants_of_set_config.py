"""
This files purpose is to be used as a script to create variants of a run config from confs/.

It takes the initial config file as input and the number of reruns to be done per experiment
(each rerun gets its own seed, so the multistart starts differ between reruns).

The syntax introduced by which new copies are made are fields with a suffix '_set',
which is always followed by a list.

So usually we might have a parameter in our config:

epec:
  alpha_cap_factor: 10.

Now we can have:

epec:
  alpha_cap_factor_set:
    - 5.
    - 10.
    - 20.

This will now yield the file being copied 3 times with alpha_cap_factor_set replaced by the respective settings.

So every field with a '_set' has to have a list as value and for each entry in each of these lists a copy will be made,
s.t. if we had two '_set' fields with 2 and 5 entries respectively we would get 2*5=10 files.

These files will be saved in the same directory as the input config with name changes like
__epec.alpha_cap_factor=5.0__1try. With an output directory in `case.out`, every variant writes into its own
subdirectory named like the file.
"""

import argparse
import os
import yaml
from copy import deepcopy


def access_with_path(dict_or_list, list_of_indices):
    current_dict_or_list = dict_or_list
    for idx in list_of_indices:
        current_dict_or_list = current_dict_or_list[idx]
    return current_dict_or_list


def find_all_fields_with_suffix(dict_or_list, suffix):
    result_paths = []
    if isinstance(dict_or_list, dict):
        for key in dict_or_list.keys():
            if key.endswith(suffix):
                result_paths.append([key])

    key_iterator = range(len(dict_or_list)) if isinstance(dict_or_list, list) else dict_or_list.keys()

    for key in key_iterator:
        if isinstance(dict_or_list[key], (list, dict)) and not (isinstance(key, str) and key.endswith(suffix)):
            sub_result_sub_paths = find_all_fields_with_suffix(dict_or_list[key], suffix)
            result_paths += [[key] + p for p in sub_result_sub_paths]

    return result_paths


def expand_set_fields(initial_config, name_prefix, suffix='_set'):
    """All combinations of the '_set' fields as a list of (config, name)."""
    set_paths = find_all_fields_with_suffix(initial_config, suffix)
    config_set = [(initial_config, name_prefix)]
    for set_path in set_paths:
        options = access_with_path(initial_config, set_path)
        assert isinstance(options, list), f'{".".join(map(str, set_path))} must hold a list'
        new_config_set = []
        for config, prefix in config_set:
            for option in options:
                config_copy = deepcopy(config)
                mother_dict = access_with_path(config_copy, set_path[:-1])
                mother_dict.pop(set_path[-1])
                mother_dict[set_path[-1][:-len(suffix)]] = option
                new_config_set.append(
                    (config_copy, prefix + '__' + '.'.join(map(str, set_path))[:-len(suffix)] + '=' + str(option)))
        config_set = new_config_set
    return config_set


def with_reruns(config_set, number_of_reruns):
    """One copy per rerun with seed ``rerun_idx - 1`` and, if set, a per-variant output directory."""
    for config, path_prefix in config_set:
        for rerun_idx in range(1, number_of_reruns + 1):
            config_copy = deepcopy(config)
            case = config_copy.setdefault('case', {})
            case['seed'] = rerun_idx - 1
            name = path_prefix + f'__{rerun_idx}try'
            if case.get('out'):
                case['out'] = os.path.join(case['out'], os.path.basename(name))
            yield config_copy, name + '.yaml'


if __name__ == '__main__':
    ap = argparse.ArgumentParser()
    ap.add_argument('config')
    ap.add_argument('number_of_reruns', type=int)
    args = ap.parse_args()

    with open(args.config, 'r') as config_file:
        initial_config = yaml.load(config_file, yaml.SafeLoader)

    for config, filename in with_reruns(expand_set_fields(initial_config, args.config.replace('.yaml', '')),
                                        args.number_of_reruns):
        print(filename)
        with open(filename, 'w') as config_file:
            yaml.dump(config, config_file)
