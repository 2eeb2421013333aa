from setuptools import setup, find_packages
import pathlib

requirements = [
    'pandas>=1.5.0',
    'tqdm',
    'xxhash',
    'numpy',
    'dataclasses;python_version<"3.7"',
]


_libinfo_py = pathlib.Path(__file__).parent/'nosekit/__init__.py'
with _libinfo_py.open('r') as f:
    for l in f.readlines():
        if '__version__' in l:
            __version__ = l.split('"')[1]

setup(
    name='nosekit',
    version=__version__,
    python_requires='>=3.7',
    author='',
    author_email='',
    url='',
    description='Electronic nose time series: preprocessing, GC-MS priors, models and experiments',
    license='Apache 2.0',
    packages=find_packages(include=['nosekit', 'nosekit.*']),
    zip_safe=True,
    install_requires=requirements,
    include_package_data=True,
    package_data={'nosekit.core': ['*.txt', '*.tsv']},
    entry_points={
        'console_scripts': [
            'nosekit = nosekit.main:main',
        ]
    },
)
