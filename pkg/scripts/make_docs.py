from stv import config
import jinja2
import sys
from os.path import join, dirname

REPO_ROOT = dirname(dirname(__file__))

sys.path.insert(0, REPO_ROOT)


template = """
# The run configuration

`stv` commands read an optional run configuration given with `-c FILE`.
The file is standard [YAML](https://yaml.org/) with one mapping per
section; keys are referred to by their dotted name, e.g. `train.lr`.
The file may also be a [Jinja2](https://jinja.palletsprojects.com/)
template: `{{ '{{ environ["VAR"] }}' }}` reads the environment and
`{{ '{% include %}' }}` resolves relative to the file.

Every key can be overridden on the command line as `--<section>.<key> VALUE`;
the value is read with the YAML scalar rules. `--arch`, `--epochs`, `--seed`,
`--threads` and `--matcher` are shorthands, and the working directory may
be set with `--workdir` or the `STV_WORKDIR` environment variable.

{{ reference }}
"""  # noqa

output = jinja2.Template(template).render(reference=config.generate_doc())

with open(join(REPO_ROOT, 'CONFIG.md'), 'w') as f:
    f.write(output)
