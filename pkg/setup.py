from os import linesep
from os.path import dirname
from yaml import safe_load
from re import compile, search
from setuptools import setup
from tempfile import NamedTemporaryFile


def get_conda_metadata(conda_meta_file: str) -> dict:
    """Load the conda recipe, substituting the jinja `set` variables it declares."""
    with open(conda_meta_file, mode="r") as actual, NamedTemporaryFile(
        mode="r+", dir=dirname(conda_meta_file), encoding="UTF-8", newline=linesep
    ) as temp:
        metadata_vars = {}
        metadata_rgx = compile(r"""^{%\s+set\s+(\S+)\s+=\s+(\S+)\s+%}""")
        for line in actual:
            m = search(pattern=metadata_rgx, string=line)
            if m:
                metadata_vars[m.groups()[0]] = m.groups()[1].strip('"')
            else:
                temp.write(line)
        temp.seek(0)
        conda_metadata = safe_load(temp)
    targets = {
        "org": [("source", "url"), ("about", "home")],
        "pkg_name": [("package", "name"), ("source", "url"), ("about", "home")],
        "version": [("package", "version"), ("source", "url")],
        "build_num": [("build", "number")],
    }
    for key, value in metadata_vars.items():
        for k1, k2 in targets.get(key, []):
            conda_metadata[k1][k2] = str(conda_metadata[k1][k2]).replace(f"{{{{ {key} }}}}", value)
    return conda_metadata


conda_metadata = get_conda_metadata("conda.recipe/meta.yaml")
requirements = [
    req for req in conda_metadata["requirements"]["run"] if not req.startswith("python ")
]

with open("README.md", "r") as fh:
    long_description = fh.read()

setup(
    name="aquobs",
    version=conda_metadata["package"]["version"],
    description="Observability-driven robust sensor placement for water quality in distribution networks.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="GNUv3",
    packages=["aquobs"],
    package_data={"aquobs": ["logger_settings.yml"]},
    python_requires=">=3.11.0",
    install_requires=requirements,
    include_package_data=True,
    entry_points={"console_scripts": ["aquobs=aquobs.cli:main"]},
    keywords="water-quality observability sensor-placement submodular",
    classifiers=[
        "Programming Language :: Python :: 3.11",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
        "Operating System :: POSIX :: Linux",
    ],
)
