# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

__version__ = '0.1.0'
