import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()
    # remove header
    header_lines = 3
    long_description = long_description.split("\n", header_lines)[header_lines]

setuptools.setup(
    name="lss.shadowing",
    version="0.1.0",
    setup_requires=['pytest-runner', 'flake8'],
    tests_require=['pytest'],
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.6',
        'pygelf',
        'pytz'
    ],
    description="Least squares shadowing sensitivity of chaotic ODEs with multigrid-in-time solvers",
    long_description=long_description,
    long_description_content_type="text/markdown",
    package_dir={'': 'src'},
    packages=['lss.shadowing'],
    include_package_data=True,
    zip_safe=False,
    test_suite='tests',
    entry_points={
        'console_scripts': ['lss-shadowing = lss.shadowing.cli:main'],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Mathematics",
        "Development Status :: 3 - Alpha"
    ],
    python_requires='>=3.8'
)
