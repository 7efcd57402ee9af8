from setuptools import setup, find_packages

exec(open("mgrefactor/__init__.py").read())

setup(
    name="mgrefactor",
    version=__version__,
    author="",
    author_email="",
    packages=find_packages(exclude=["tests", "tests.*"]),
    license="MIT",
    description="Multigrid hierarchical refactoring, progressive retrieval and error-bounded compression of structured grid data",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    install_requires=[
        "numpy>=1.24",
        "pyyaml",
    ],
    include_package_data=True,
    entry_points={
        "console_scripts": [
            "mgrefactor=mgrefactor.cli:main",
        ],
    },
    python_requires=">=3.10",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Environment :: Console",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Programming Language :: Python :: 3.13",
        "Topic :: Scientific/Engineering",
    ],
    keywords="multigrid refactoring progressive retrieval lossy compression",
)
