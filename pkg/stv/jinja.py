# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

import os

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateError

from .exceptions import UnableToParse


# adapted from conda-build
def render_jinja(data, directory):
    """
    Render a templated run configuration.  ``environ`` exposes the process
    environment; ``{% include %}`` resolves relative to the config file.
    """
    env = Environment(loader=FileSystemLoader(directory or os.curdir),
                      undefined=StrictUndefined)
    env.globals['environ'] = os.environ.copy()
    try:
        return env.from_string(data).render()
    except TemplateError as ex:
        raise UnableToParse(original=ex)
